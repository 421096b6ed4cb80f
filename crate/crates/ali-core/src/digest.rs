//! Content digests over named tensors.
//!
//! The canonical byte form is: for each tensor in name order,
//! `name_len | name | dtype | ndim | shape... | data (little endian)`.
//! Equal values produce equal digests; a one-ulp perturbation changes them.

use crate::scalar::Scalar;
use ndarray::ArrayD;
use sha2::{Digest as _, Sha256};
use std::collections::BTreeMap;

fn push_tensor<F: Scalar>(bytes: &mut Vec<u8>, name: &str, value: &ArrayD<F>) {
    bytes.extend_from_slice(&(name.len() as u64).to_le_bytes());
    bytes.extend_from_slice(name.as_bytes());
    bytes.extend_from_slice(F::DTYPE.as_bytes());
    bytes.extend_from_slice(&(value.ndim() as u64).to_le_bytes());
    for &d in value.shape() {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in value.iter() {
        v.write_le(bytes);
    }
}

fn hex(digest: &[u8]) -> String {
    let mut s = String::with_capacity(digest.len() * 2);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Digest of a single tensor.
pub fn digest_tensor<F: Scalar>(name: &str, value: &ArrayD<F>) -> String {
    let mut bytes = Vec::new();
    push_tensor(bytes.as_mut(), name, value);
    hex(&Sha256::digest(&bytes))
}

/// Digest of a set of named tensors, in name order.
pub fn digest_tensors<F: Scalar>(tensors: &BTreeMap<String, ArrayD<F>>) -> String {
    let mut bytes = Vec::new();
    for (name, value) in tensors {
        push_tensor(&mut bytes, name, value);
    }
    hex(&Sha256::digest(&bytes))
}

/// Digest of an arbitrary byte buffer (artifact files, configs).
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn equal_tensors_equal_digest() {
        let a = arr1(&[1.0f32, 2.0, 3.0]).into_dyn();
        let b = arr1(&[1.0f32, 2.0, 3.0]).into_dyn();
        assert_eq!(digest_tensor("w", &a), digest_tensor("w", &b));
    }

    #[test]
    fn one_ulp_changes_digest() {
        let a = arr1(&[1.0f64]).into_dyn();
        let mut b = a.clone();
        b[0] = f64::from_bits(b[0].to_bits() + 1);
        assert_ne!(digest_tensor("w", &a), digest_tensor("w", &b));
    }

    #[test]
    fn name_participates() {
        let a = arr1(&[1.0f32]).into_dyn();
        assert_ne!(digest_tensor("a", &a), digest_tensor("b", &a));
    }
}

//! Frozen visual priors and hypercolumn extraction.
//!
//! Three equal-capacity priors share one convolutional trunk: a frozen random
//! init, a masked-reconstruction pretrain, and a contrastive pretrain whose
//! positive pairs are two lightings of the same scene plus color jitter. The
//! trunk is all that survives pretraining; auxiliary decoder/head parameters
//! live under `aux.` and are dropped when the prior is frozen.

use crate::archive::{read_archive, write_archive};
use crate::datagen::DatasetManifest;
use crate::digest::digest_tensors;
use crate::encoder::batch_from_images;
use crate::error::{AliError, Result};
use crate::losses::mse_node;
use crate::nn::{AdamW, Conv2d, Linear, ParamGroup, ParamStore};
use crate::rng::{child_seed, stream};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};
use ndarray::{Array1, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Which pretraining objective produced the prior.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    RandomFrozen,
    ReconPretrained,
    ContrastivePretrained,
}

impl PriorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorKind::RandomFrozen => "random_frozen",
            PriorKind::ReconPretrained => "recon_pretrained",
            PriorKind::ContrastivePretrained => "contrastive_pretrained",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" | "random_frozen" => Ok(PriorKind::RandomFrozen),
            "recon" | "recon_pretrained" => Ok(PriorKind::ReconPretrained),
            "contrastive" | "contrastive_pretrained" => Ok(PriorKind::ContrastivePretrained),
            _ => Err(AliError::Config(format!("unknown prior kind {s}"))),
        }
    }
}

/// Prior architecture and tap selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualPriorConfig {
    pub kind: PriorKind,
    /// Trunk widths; each block halves the resolution.
    pub block_channels: Vec<usize>,
    /// 1-based indices of the blocks whose outputs form the hypercolumn.
    pub selected_layers: Vec<usize>,
}

impl Default for VisualPriorConfig {
    fn default() -> Self {
        VisualPriorConfig {
            kind: PriorKind::ReconPretrained,
            block_channels: vec![16, 32, 64, 64],
            selected_layers: vec![1, 2, 3],
        }
    }
}

impl VisualPriorConfig {
    pub fn depth(&self) -> usize {
        self.block_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.selected_layers.is_empty() {
            return Err(AliError::Config("need at least one selected layer".into()));
        }
        for &l in &self.selected_layers {
            if l < 1 || l > self.depth() {
                return Err(AliError::Config(format!(
                    "selected layer {l} out of range 1..={}",
                    self.depth()
                )));
            }
        }
        Ok(())
    }

    /// Channel count of each selected layer.
    pub fn selected_channels(&self) -> Vec<usize> {
        self.selected_layers
            .iter()
            .map(|&l| self.block_channels[l - 1])
            .collect()
    }

    /// Total hypercolumn channel count.
    pub fn hypercolumn_channels(&self) -> usize {
        self.selected_channels().iter().sum()
    }
}

/// Pretraining knobs shared by the recon and contrastive objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of image area hidden by square masks (recon objective).
    pub mask_ratio: f64,
    /// Side length of each mask square, in pixels.
    pub mask_patch: usize,
    /// Softmax temperature (contrastive objective).
    pub temperature: f64,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        PriorTrainConfig {
            epochs: 6,
            batch: 16,
            lr: 1e-3,
            mask_ratio: 0.5,
            mask_patch: 8,
            temperature: 0.2,
        }
    }
}

/// The prior trunk; parameters live under `prior.`.
#[derive(Clone, Debug)]
pub struct PriorNet {
    pub cfg: VisualPriorConfig,
    blocks: Vec<Conv2d>,
}

impl PriorNet {
    pub fn new(cfg: &VisualPriorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (i, &c) in cfg.block_channels.iter().enumerate() {
            blocks.push(Conv2d::new(&format!("prior.block{i}"), cin, c, 3, 2, 1));
            cin = c;
        }
        Ok(PriorNet {
            cfg: cfg.clone(),
            blocks,
        })
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    /// All block outputs (pre-activation), shallowest first. The prior is
    /// frozen by construction: parameters bind as non-trainable leaves.
    pub fn forward_all<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Vec<Var>> {
        let mut taps = Vec::new();
        let mut h = x;
        for b in &self.blocks {
            let y = b.forward(g, store, h, false)?;
            taps.push(y);
            h = g.silu(y);
        }
        Ok(taps)
    }

    /// The selected intermediate feature maps, in layer order.
    pub fn forward_selected<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Vec<Var>> {
        let taps = self.forward_all(g, store, x)?;
        Ok(self
            .cfg
            .selected_layers
            .iter()
            .map(|&l| taps[l - 1])
            .collect())
    }
}

/// Frozen prior: trunk parameters plus the metadata record that identifies it.
#[derive(Clone, Debug)]
pub struct PriorCheckpoint<F: Scalar> {
    pub store: ParamStore<F>,
    pub cfg: VisualPriorConfig,
    pub meta: PriorMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorMeta {
    pub kind: PriorKind,
    pub layers: Vec<usize>,
    pub channels: Vec<usize>,
    pub seed: u64,
    pub digest: String,
    pub pretrain_steps: usize,
}

/// Loss trajectory of a pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorTrainReport {
    pub first_loss: f64,
    pub last_loss: f64,
    pub steps: usize,
    pub skipped_scenes: usize,
}

impl<F: Scalar> PriorCheckpoint<F> {
    pub fn digest(&self) -> String {
        self.store.group_digest(ParamGroup::Prior)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: BTreeMap<String, ndarray::ArrayD<F>> = self
            .store
            .iter()
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        let meta = serde_json::json!({
            "record": "visual_prior",
            "meta": self.meta,
            "cfg": self.cfg,
        });
        write_archive(path, &tensors, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = read_archive::<F>(path)?;
        let cfg: VisualPriorConfig = serde_json::from_value(meta["cfg"].clone())?;
        let pm: PriorMeta = serde_json::from_value(meta["meta"].clone())?;
        let mut store = ParamStore::new();
        for (n, v) in tensors {
            store.insert(&n, v);
        }
        let ckpt = PriorCheckpoint { store, cfg, meta: pm };
        if ckpt.digest() != ckpt.meta.digest {
            return Err(AliError::Contract(
                "prior archive digest does not match its parameters".into(),
            ));
        }
        Ok(ckpt)
    }
}

/// Build a random frozen prior.
pub fn init_prior<F: Scalar>(cfg: &VisualPriorConfig, seed: u64) -> Result<PriorCheckpoint<F>> {
    let net = PriorNet::new(cfg)?;
    let mut store = ParamStore::new();
    net.init(&mut store, &mut stream(seed, "prior/init"));
    let digest = store.group_digest(ParamGroup::Prior);
    Ok(PriorCheckpoint {
        store,
        cfg: cfg.clone(),
        meta: PriorMeta {
            kind: cfg.kind,
            layers: cfg.selected_layers.clone(),
            channels: cfg.selected_channels(),
            seed,
            digest,
            pretrain_steps: 0,
        },
    })
}

/// Selected prior feature maps for one image (frozen forward pass).
pub fn prior_features<F: Scalar>(
    image: &Array3<f64>,
    ckpt: &PriorCheckpoint<F>,
) -> Result<Vec<Array3<F>>> {
    let net = PriorNet::new(&ckpt.cfg)?;
    let mut g = Graph::<F>::new();
    let x = g.input(batch_from_images::<F>(std::slice::from_ref(image)));
    let maps = net.forward_selected(&mut g, &ckpt.store, x)?;
    Ok(maps
        .iter()
        .map(|&v| {
            g.value(v)
                .index_axis(Axis(0), 0)
                .to_owned()
                .into_dimensionality()
                .unwrap()
        })
        .collect())
}

/// Upsample each map to `(h, w)` bilinearly and concatenate channelwise.
pub fn hypercolumn_node<F: Scalar>(g: &mut Graph<F>, maps: &[Var], h: usize, w: usize) -> Var {
    let ups: Vec<Var> = maps
        .iter()
        .map(|&m| g.upsample_bilinear(m, h, w))
        .collect();
    g.concat_channels(&ups)
}

/// Pixel-wise hypercolumn descriptor `[C_H, H, W]` from feature maps.
pub fn extract_hypercolumn<F: Scalar>(
    maps: &[Array3<F>],
    h: usize,
    w: usize,
) -> Result<Array3<F>> {
    if maps.is_empty() {
        return Err(AliError::Contract(
            "extract_hypercolumn: empty feature-map list".into(),
        ));
    }
    let mut g = Graph::<F>::new();
    let vars: Vec<Var> = maps
        .iter()
        .map(|m| {
            let mut b = m.clone().insert_axis(Axis(0)).into_dyn();
            b.as_standard_layout();
            g.input(b)
        })
        .collect();
    let hc = hypercolumn_node(&mut g, &vars, h, w);
    Ok(g.value(hc)
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .unwrap())
}

fn flatten_images(scenes: &[crate::datagen::LoadedScene]) -> Vec<Array3<f64>> {
    scenes
        .iter()
        .flat_map(|s| s.images.iter().map(|(_, img)| img.clone()))
        .collect()
}

fn check_finite(loss: f64, what: &str, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(AliError::Training(format!(
            "{what} diverged at step {step}: loss {loss}"
        )));
    }
    Ok(())
}

/// Masked-reconstruction pretraining; the encoder trunk becomes the prior.
pub fn pretrain_recon_prior<F: Scalar>(
    manifest: &DatasetManifest,
    prior_cfg: &VisualPriorConfig,
    train_cfg: &PriorTrainConfig,
    seed: u64,
) -> Result<(PriorCheckpoint<F>, PriorTrainReport)> {
    if !(0.0..=1.0).contains(&train_cfg.mask_ratio) {
        return Err(AliError::Config(format!(
            "mask_ratio {} outside [0,1]",
            train_cfg.mask_ratio
        )));
    }
    let scenes = manifest.load_split()?;
    if scenes.is_empty() {
        return Err(AliError::Precondition("empty train split".into()));
    }
    let images = flatten_images(&scenes);
    let (h, w) = (images[0].shape()[0], images[0].shape()[1]);

    let net = PriorNet::new(prior_cfg)?;
    let mut store = ParamStore::<F>::new();
    net.init(&mut store, &mut stream(seed, "prior/init"));

    // Mirror decoder, discarded after pretraining.
    let depth = prior_cfg.depth();
    let mut dec_convs = Vec::new();
    for i in (0..depth).rev() {
        let cin = prior_cfg.block_channels[i];
        let cout = if i == 0 { 16 } else { prior_cfg.block_channels[i - 1] };
        dec_convs.push(Conv2d::new(&format!("aux.dec{i}"), cin, cout, 3, 1, 1));
    }
    let out_conv = Conv2d::new("aux.out", 16, 3, 3, 1, 1);
    {
        let mut rng = stream(seed, "prior/aux-init");
        for c in &dec_convs {
            c.init(&mut store, &mut rng);
        }
        out_conv.init(&mut store, &mut rng);
    }

    let mut opt = AdamW::<F>::new(train_cfg.lr, 0.01);
    let mut first_loss = None;
    let mut last_loss = 0.0;
    let mut steps = 0usize;

    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut stream(seed, &format!("prior/recon/epoch{epoch}")));
        for (bi, chunk) in order.chunks(train_cfg.batch).enumerate() {
            let mut rng = stream(seed, &format!("prior/recon/e{epoch}b{bi}"));
            let batch: Vec<Array3<f64>> = chunk
                .iter()
                .map(|&i| mask_image(&images[i], train_cfg, &mut rng))
                .collect();
            let targets: Vec<Array3<f64>> = chunk.iter().map(|&i| images[i].clone()).collect();

            let mut g = Graph::<F>::new();
            let x = g.input(batch_from_images::<F>(&batch));
            let t = g.input(batch_from_images::<F>(&targets));
            // Trunk is trainable here; this is the one phase that shapes it.
            let mut hidden = x;
            for b in PriorNet::new(prior_cfg)?.blocks.iter() {
                let y = b.forward(&mut g, &store, hidden, true)?;
                hidden = g.silu(y);
            }
            for (k, c) in dec_convs.iter().enumerate() {
                let i = depth - 1 - k;
                let (th, tw) = (h >> i, w >> i);
                let up = g.upsample_bilinear(hidden, th, tw);
                let y = c.forward(&mut g, &store, up, true)?;
                hidden = g.silu(y);
            }
            let y = out_conv.forward(&mut g, &store, hidden, true)?;
            let pred = g.sigmoid(y);
            let loss = mse_node(&mut g, pred, t);
            let loss_val = g.scalar(loss).to_f64();
            check_finite(loss_val, "recon prior", steps)?;
            if first_loss.is_none() {
                first_loss = Some(loss_val);
            }
            last_loss = loss_val;
            let grads = g.backward(loss);
            opt.step(&mut store, &grads.by_param)?;
            steps += 1;
        }
    }

    // Keep only the trunk.
    let mut prior_store = ParamStore::new();
    for (n, v) in store.iter() {
        if n.starts_with(ParamGroup::Prior.prefix()) {
            prior_store.insert(n, v.clone());
        }
    }
    let digest = prior_store.group_digest(ParamGroup::Prior);
    let mut cfg = prior_cfg.clone();
    cfg.kind = PriorKind::ReconPretrained;
    let ckpt = PriorCheckpoint {
        store: prior_store,
        cfg: cfg.clone(),
        meta: PriorMeta {
            kind: PriorKind::ReconPretrained,
            layers: cfg.selected_layers.clone(),
            channels: cfg.selected_channels(),
            seed,
            digest,
            pretrain_steps: steps,
        },
    };
    let report = PriorTrainReport {
        first_loss: first_loss.unwrap_or(0.0),
        last_loss,
        steps,
        skipped_scenes: 0,
    };
    if steps > 0 && report.last_loss > 0.5 * report.first_loss {
        log::warn!(
            "recon prior loss fell only {:.1}% (first {:.5}, last {:.5})",
            100.0 * (1.0 - report.last_loss / report.first_loss),
            report.first_loss,
            report.last_loss
        );
    }
    Ok((ckpt, report))
}

fn mask_image(img: &Array3<f64>, cfg: &PriorTrainConfig, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = img.clone();
    if cfg.mask_ratio <= 0.0 {
        return out;
    }
    let patch = cfg.mask_patch.max(1).min(h.min(w));
    let n_patches =
        ((cfg.mask_ratio * (h * w) as f64) / (patch * patch) as f64).round() as usize;
    for _ in 0..n_patches {
        let i0 = rng.gen_range(0..=(h - patch));
        let j0 = rng.gen_range(0..=(w - patch));
        for i in i0..i0 + patch {
            for j in j0..j0 + patch {
                for c in 0..3 {
                    out[[i, j, c]] = 0.0;
                }
            }
        }
    }
    out
}

/// Per-channel gain and brightness jitter, clamped back to `[0,1]`.
pub fn color_jitter(img: &Array3<f64>, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let gains = [
        rng.gen_range(0.7..1.3),
        rng.gen_range(0.7..1.3),
        rng.gen_range(0.7..1.3),
    ];
    let offset = rng.gen_range(-0.08..0.08);
    let mut out = img.clone();
    for ((_, _, c), v) in out.indexed_iter_mut() {
        *v = (*v * gains[c] + offset).clamp(0.0, 1.0);
    }
    out
}

/// Symmetric InfoNCE over two normalized embedding sets `[G, D]`.
pub fn info_nce_node<F: Scalar>(g: &mut Graph<F>, z1: Var, z2: Var, temperature: f64) -> Var {
    let n = g.value(z1).shape()[0];
    let z2t = g.transpose2(z2);
    let sim = g.matmul(z1, z2t);
    let sim = g.scale_add(sim, 1.0 / temperature, 0.0);
    let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();

    let lse12 = g.logsumexp_rows(sim);
    let pos12 = g.select_entries(sim, &diag);
    let d12 = g.sub(lse12, pos12);
    let l12 = g.mean_all(d12);

    let simt = g.transpose2(sim);
    let lse21 = g.logsumexp_rows(simt);
    let pos21 = g.select_entries(simt, &diag);
    let d21 = g.sub(lse21, pos21);
    let l21 = g.mean_all(d21);

    let sum = g.add(l12, l21);
    g.scale_add(sum, 0.5, 0.0)
}

/// Contrastive pretraining: positives are two lightings of one scene, with
/// color jitter on both views.
pub fn pretrain_contrastive_prior<F: Scalar>(
    manifest: &DatasetManifest,
    prior_cfg: &VisualPriorConfig,
    train_cfg: &PriorTrainConfig,
    seed: u64,
) -> Result<(PriorCheckpoint<F>, PriorTrainReport)> {
    if train_cfg.temperature <= 0.0 {
        return Err(AliError::Config(format!(
            "contrastive temperature must be positive, got {}",
            train_cfg.temperature
        )));
    }
    let scenes = manifest.load_split()?;
    let mut usable = Vec::new();
    let mut skipped = 0usize;
    for s in scenes {
        if s.images.len() >= 2 {
            usable.push(s);
        } else {
            skipped += 1;
            log::warn!("scene {} has one lighting; skipped", s.scene_id);
        }
    }
    if usable.is_empty() {
        return Err(AliError::Precondition(
            "no scene has two or more lightings".into(),
        ));
    }

    let net = PriorNet::new(prior_cfg)?;
    let mut store = ParamStore::<F>::new();
    net.init(&mut store, &mut stream(seed, "prior/init"));
    let embed_dim = 32;
    let head = Linear::new("aux.head", *prior_cfg.block_channels.last().unwrap(), embed_dim);
    head.init(&mut store, &mut stream(seed, "prior/aux-init"));

    let mut opt = AdamW::<F>::new(train_cfg.lr, 0.01);
    let mut first_loss = None;
    let mut last_loss = 0.0;
    let mut steps = 0usize;

    let group = train_cfg.batch.max(2).min(usable.len());
    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut stream(seed, &format!("prior/ctr/epoch{epoch}")));
        for (bi, chunk) in order.chunks(group).enumerate() {
            if chunk.len() < 2 {
                continue; // InfoNCE needs negatives
            }
            let mut rng = stream(seed, &format!("prior/ctr/e{epoch}b{bi}"));
            let mut v1 = Vec::new();
            let mut v2 = Vec::new();
            for &si in chunk {
                let s = &usable[si];
                let a = rng.gen_range(0..s.images.len());
                let mut b = rng.gen_range(0..s.images.len() - 1);
                if b >= a {
                    b += 1;
                }
                v1.push(color_jitter(&s.images[a].1, &mut rng));
                v2.push(color_jitter(&s.images[b].1, &mut rng));
            }

            let mut g = Graph::<F>::new();
            let embed = |g: &mut Graph<F>, store: &ParamStore<F>, imgs: &[Array3<f64>]| -> Result<Var> {
                let x = g.input(batch_from_images::<F>(imgs));
                let mut hidden = x;
                for b in PriorNet::new(prior_cfg)?.blocks.iter() {
                    let y = b.forward(g, store, hidden, true)?;
                    hidden = g.silu(y);
                }
                let pooled = g.global_avg_pool(hidden);
                let z = head.forward(g, store, pooled, true)?;
                Ok(g.row_normalize(z))
            };
            let z1 = embed(&mut g, &store, &v1)?;
            let z2 = embed(&mut g, &store, &v2)?;
            let loss = info_nce_node(&mut g, z1, z2, train_cfg.temperature);
            let loss_val = g.scalar(loss).to_f64();
            check_finite(loss_val, "contrastive prior", steps)?;
            if first_loss.is_none() {
                first_loss = Some(loss_val);
            }
            last_loss = loss_val;
            let grads = g.backward(loss);
            opt.step(&mut store, &grads.by_param)?;
            steps += 1;
        }
    }

    let mut prior_store = ParamStore::new();
    for (n, v) in store.iter() {
        if n.starts_with(ParamGroup::Prior.prefix()) {
            prior_store.insert(n, v.clone());
        }
    }
    let digest = prior_store.group_digest(ParamGroup::Prior);
    let mut cfg = prior_cfg.clone();
    cfg.kind = PriorKind::ContrastivePretrained;
    let ckpt = PriorCheckpoint {
        store: prior_store,
        cfg: cfg.clone(),
        meta: PriorMeta {
            kind: PriorKind::ContrastivePretrained,
            layers: cfg.selected_layers.clone(),
            channels: cfg.selected_channels(),
            seed,
            digest,
            pretrain_steps: steps,
        },
    };
    Ok((
        ckpt,
        PriorTrainReport {
            first_loss: first_loss.unwrap_or(0.0),
            last_loss,
            steps,
            skipped_scenes: skipped,
        },
    ))
}

/// Pooled embedding over the selected layers: inputs to the linear probe and
/// the similarity diagnostics.
pub fn pooled_prior_embedding<F: Scalar>(
    image: &Array3<f64>,
    ckpt: &PriorCheckpoint<F>,
) -> Result<Array1<f64>> {
    let maps = prior_features(image, ckpt)?;
    let total: usize = maps.iter().map(|m| m.shape()[0]).sum();
    let mut out = Array1::<f64>::zeros(total);
    let mut at = 0;
    for m in maps {
        let c = m.shape()[0];
        let hw = (m.shape()[1] * m.shape()[2]) as f64;
        for ci in 0..c {
            out[at + ci] = m.index_axis(Axis(0), ci).iter().map(|v| v.to_f64()).sum::<f64>() / hw;
        }
        at += c;
    }
    Ok(out)
}

/// Cosine similarity of two pooled embeddings.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Mean same-scene minus mean cross-scene pooled-embedding cosine similarity.
pub fn scene_similarity_gap<F: Scalar>(
    ckpt: &PriorCheckpoint<F>,
    scenes: &[crate::datagen::LoadedScene],
) -> Result<f64> {
    let mut embeds: Vec<Vec<Array1<f64>>> = Vec::new();
    for s in scenes {
        let mut per = Vec::new();
        for (_, img) in s.images.iter().take(4) {
            per.push(pooled_prior_embedding(img, ckpt)?);
        }
        embeds.push(per);
    }
    let mut same = Vec::new();
    let mut cross = Vec::new();
    for (si, per) in embeds.iter().enumerate() {
        for i in 0..per.len() {
            for j in (i + 1)..per.len() {
                same.push(cosine(&per[i], &per[j]));
            }
            for (sj, other) in embeds.iter().enumerate() {
                if sj != si && !other.is_empty() {
                    cross.push(cosine(&per[i], &other[0]));
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(mean(&same) - mean(&cross))
}

/// Fraction of hypercolumn variance explained by lighting changes within a
/// scene, averaged over scenes. Scale-free so priors can be compared.
pub fn lighting_variance_ratio<F: Scalar>(
    ckpt: &PriorCheckpoint<F>,
    scenes: &[crate::datagen::LoadedScene],
) -> Result<f64> {
    let mut ratios = Vec::new();
    for s in scenes {
        if s.images.len() < 2 {
            continue;
        }
        let (h, w) = (s.images[0].1.shape()[0], s.images[0].1.shape()[1]);
        let cols: Vec<Array3<F>> = s
            .images
            .iter()
            .map(|(_, img)| {
                let maps = prior_features(img, ckpt)?;
                extract_hypercolumn(&maps, h, w)
            })
            .collect::<Result<Vec<_>>>()?;
        let m = cols.len() as f64;
        let len = cols[0].len();
        let mut mean_var = 0.0;
        let mut all_vals: Vec<f64> = Vec::with_capacity(len * cols.len());
        for idx in 0..len {
            let vals: Vec<f64> = cols
                .iter()
                .map(|c| c.as_slice().unwrap()[idx].to_f64())
                .collect();
            let mu = vals.iter().sum::<f64>() / m;
            mean_var += vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            all_vals.extend(vals);
        }
        mean_var /= len as f64;
        let mu_all = all_vals.iter().sum::<f64>() / all_vals.len() as f64;
        let var_all = all_vals
            .iter()
            .map(|v| (v - mu_all) * (v - mu_all))
            .sum::<f64>()
            / all_vals.len() as f64;
        ratios.push(mean_var / (var_all + 1e-12));
    }
    if ratios.is_empty() {
        return Err(AliError::Precondition(
            "lighting_variance_ratio: no scene with >= 2 lightings".into(),
        ));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tiny_prior_cfg() -> VisualPriorConfig {
        VisualPriorConfig {
            kind: PriorKind::RandomFrozen,
            block_channels: vec![4, 8, 8, 8],
            selected_layers: vec![1, 2, 3],
        }
    }

    fn rand_image(seed: u64, h: usize, w: usize) -> Array3<f64> {
        let mut rng = stream(seed, "priors/test-img");
        Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn selected_maps_have_expected_strides() {
        let cfg = tiny_prior_cfg();
        let ckpt = init_prior::<f32>(&cfg, 1).unwrap();
        let img = rand_image(2, 32, 32);
        let maps = prior_features(&img, &ckpt).unwrap();
        assert_eq!(maps.len(), 3);
        assert_eq!(maps[0].shape(), &[4, 16, 16]); // stride 2
        assert_eq!(maps[1].shape(), &[8, 8, 8]); // stride 4
        assert_eq!(maps[2].shape(), &[8, 4, 4]); // stride 8
    }

    #[test]
    fn bad_layer_index_rejected() {
        let mut cfg = tiny_prior_cfg();
        cfg.selected_layers = vec![5];
        assert!(matches!(
            init_prior::<f32>(&cfg, 1),
            Err(AliError::Config(_))
        ));
    }

    #[test]
    fn random_prior_reproducible() {
        let cfg = tiny_prior_cfg();
        let a = init_prior::<f32>(&cfg, 7).unwrap();
        let b = init_prior::<f32>(&cfg, 7).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = init_prior::<f32>(&cfg, 8).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn hypercolumn_counts_channels_and_keeps_constants() {
        let a = Array3::<f64>::from_elem((8, 4, 4), 0.3);
        let b = Array3::<f64>::from_elem((16, 2, 2), -1.2);
        let hc = extract_hypercolumn(&[a, b], 8, 8).unwrap();
        assert_eq!(hc.shape(), &[24, 8, 8]);
        for c in 0..8 {
            assert!(hc.index_axis(Axis(0), c).iter().all(|v| (v - 0.3).abs() < 1e-12));
        }
        for c in 8..24 {
            assert!(hc.index_axis(Axis(0), c).iter().all(|v| (v + 1.2).abs() < 1e-12));
        }
        assert!(extract_hypercolumn::<f64>(&[], 8, 8).is_err());
    }

    #[test]
    fn contrastive_rejects_bad_temperature() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::datagen::SceneGenConfig {
            height: 16,
            width: 16,
            ..Default::default()
        };
        let manifest =
            crate::datagen::make_dataset(2, 2, 3, dir.path(), "train", &cfg, None).unwrap();
        let mut tc = PriorTrainConfig::default();
        tc.temperature = 0.0;
        assert!(matches!(
            pretrain_contrastive_prior::<f32>(&manifest, &tiny_prior_cfg(), &tc, 0),
            Err(AliError::Config(_))
        ));
    }

    #[test]
    fn zero_epoch_pretrain_keeps_init_digest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::datagen::SceneGenConfig {
            height: 16,
            width: 16,
            ..Default::default()
        };
        let manifest =
            crate::datagen::make_dataset(2, 2, 3, dir.path(), "train", &cfg, None).unwrap();
        let mut tc = PriorTrainConfig::default();
        tc.epochs = 0;
        let (ckpt, report) =
            pretrain_recon_prior::<f32>(&manifest, &tiny_prior_cfg(), &tc, 11).unwrap();
        assert_eq!(report.steps, 0);
        let init = init_prior::<f32>(&tiny_prior_cfg(), 11).unwrap();
        assert_eq!(ckpt.digest(), init.digest());
    }

    #[test]
    fn prior_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = init_prior::<f32>(&tiny_prior_cfg(), 5).unwrap();
        let path = dir.path().join("prior.bin");
        ckpt.save(&path).unwrap();
        let loaded = PriorCheckpoint::<f32>::load(&path).unwrap();
        assert_eq!(loaded.digest(), ckpt.digest());
        assert_eq!(loaded.meta, ckpt.meta);
    }

    #[test]
    fn info_nce_prefers_aligned_pairs() {
        let mut g = Graph::<f64>::new();
        let aligned = g.input(ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn());
        let l_aligned = info_nce_node(&mut g, aligned, aligned, 0.2);
        let v_aligned = g.scalar(l_aligned);

        let mut g2 = Graph::<f64>::new();
        let z1 = g2.input(ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn());
        let z2 = g2.input(ndarray::arr2(&[[0.0, 1.0], [1.0, 0.0]]).into_dyn());
        let l_swapped = info_nce_node(&mut g2, z1, z2, 0.2);
        let v_swapped = g2.scalar(l_swapped);
        assert!(v_aligned < v_swapped);
    }
}

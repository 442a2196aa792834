//! Model assembly: input features, backbone stack, per-resolution patch
//! pipelines, and task heads, together with the per-mesh precompute bundle
//! the forward pass consumes.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, Tape, TensorId};
use crate::error::{Error, Result};
use crate::geodesic::{build_mask, supernode_geodesics, AttentionMask};
use crate::layers::{
    patch_to_node_multi, BackboneKind, Bound, CrossAttentionInteract, DiffusionBlock, LayerConfig,
    Linear, MlpBlock, ParamSet, PatchAggregate, TransformerBlock,
};
use crate::linalg::Mat;
use crate::mesh::{cotan_laplacian, edge_graph, normalize_mesh, Mesh};
use crate::rng;
use crate::spectral::{compute_hks, eigendecompose, log_time_samples, SpectralBasis};
use crate::tokenize::{
    baseline_partition, edge_distances, patch_average, root_node_partition, ClampMode,
    Partitioning,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Segmentation,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFeatures {
    /// Heat kernel signature channels (intrinsic, pose-invariant).
    Hks,
    /// Raw 3D coordinates of the normalized mesh (pose-sensitive).
    Xyz,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMethod {
    Rns,
    Baseline,
    /// Assignment loaded from an external file; supplied by the caller.
    Import,
}

/// Full model + run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: LayerConfig,
    pub task: TaskKind,
    pub n_classes: usize,
    /// Patch count for single-resolution runs.
    pub partitions: usize,
    /// Non-empty enables the multi-resolution path (one pipeline per entry).
    pub multi_res: Vec<usize>,
    /// Geodesic mask radius; absent or infinite disables masking.
    pub mask_radius: Option<f64>,
    pub partition_method: PartitionMethod,
    /// Add patch-averaged HKS (through a linear layer) to the patch tokens.
    pub hks_se: bool,
    pub input_features: InputFeatures,
    pub k_eig: usize,
    pub hks_count: usize,
    pub hks_t_min: f64,
    pub hks_t_max: f64,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: LayerConfig::default(),
            task: TaskKind::Segmentation,
            n_classes: 8,
            partitions: 256,
            multi_res: Vec::new(),
            mask_radius: None,
            partition_method: PartitionMethod::Rns,
            hks_se: true,
            input_features: InputFeatures::Hks,
            k_eig: 128,
            hks_count: 16,
            hks_t_min: 0.01,
            hks_t_max: 1.0,
            seed: 0,
            epochs: 200,
            lr: 1e-3,
            lr_decay_every: 50,
            lr_decay_factor: 0.5,
            weight_decay: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.layers.validate()?;
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.partitions == 0 {
            return Err(Error::Config("partition count must be positive".into()));
        }
        if self.multi_res.iter().any(|&p| p == 0) {
            return Err(Error::Config("multi_res entries must be positive".into()));
        }
        if let Some(r) = self.mask_radius {
            if r < 0.0 {
                return Err(Error::Config(format!("mask radius {r} is negative")));
            }
        }
        if self.k_eig == 0 || self.hks_count == 0 {
            return Err(Error::Config("k_eig and hks_count must be positive".into()));
        }
        Ok(())
    }

    /// Patch counts per pipeline (single entry unless multi-resolution).
    pub fn resolutions(&self) -> Vec<usize> {
        if self.multi_res.is_empty() {
            vec![self.partitions]
        } else {
            self.multi_res.clone()
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.input_features {
            InputFeatures::Hks => self.hks_count,
            InputFeatures::Xyz => 3,
        }
    }
}

/// Everything the forward pass needs, computed once per mesh.
pub struct PrecomputeBundle {
    pub mesh_hash: u64,
    /// Vertex positions of the normalized mesh (N x 3).
    pub xyz: Mat,
    pub basis: Rc<SpectralBasis>,
    /// N x T heat kernel signatures.
    pub hks: Mat,
    /// One partitioning per resolution.
    pub parts: Vec<Partitioning>,
    /// Patch-averaged HKS per resolution (P_r x T).
    pub patch_hks: Vec<Mat>,
    /// Geodesic mask per resolution; None when masking is off.
    pub masks: Vec<Option<AttentionMask>>,
}

impl PrecomputeBundle {
    /// Relabel the vertex axis by `perm` (perm[old] = new). Patch ids keep
    /// their identity, so patch-level data is untouched. `new_hash` is the
    /// content hash of the relabeled mesh this bundle now belongs to.
    pub fn permuted(&self, perm: &[usize], new_hash: u64) -> Result<PrecomputeBundle> {
        let n = self.xyz.rows();
        if perm.len() != n {
            return Err(Error::validation("permutation length mismatch"));
        }
        let permute_rows = |m: &Mat| -> Mat {
            let mut out = Mat::zeros(m.rows(), m.cols());
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    out.set(perm[i], j, m.at(i, j));
                }
            }
            out
        };
        let parts: Result<Vec<Partitioning>> =
            self.parts.iter().map(|p| p.permuted(perm)).collect();
        Ok(PrecomputeBundle {
            mesh_hash: new_hash,
            xyz: permute_rows(&self.xyz),
            basis: Rc::new(self.basis.permuted(perm)),
            hks: permute_rows(&self.hks),
            parts: parts?,
            patch_hks: self.patch_hks.clone(),
            masks: self.masks.clone(),
        })
    }
}

/// Compute a bundle directly (no cache). Partitions use the configured
/// method; imports must be supplied via `with_partitions`.
pub fn precompute_bundle(mesh: &Mesh, cfg: &ModelConfig) -> Result<PrecomputeBundle> {
    let parts = compute_partitions(mesh, cfg)?;
    bundle_with_partitions(mesh, cfg, parts)
}

pub fn compute_partitions(mesh: &Mesh, cfg: &ModelConfig) -> Result<Vec<Partitioning>> {
    let normalized = normalize_mesh(mesh)?;
    let mut parts = Vec::new();
    for &p in &cfg.resolutions() {
        let part = match cfg.partition_method {
            PartitionMethod::Rns => {
                let ops = cotan_laplacian(&normalized)?;
                let dg = edge_distances(&ops, ClampMode::Exclude);
                root_node_partition(&dg, p, cfg.seed, 10)?
            }
            PartitionMethod::Baseline => baseline_partition(&normalized, p, cfg.seed)?,
            PartitionMethod::Import => {
                return Err(Error::Config(
                    "imported partitions must be supplied explicitly".into(),
                ))
            }
        };
        parts.push(part);
    }
    Ok(parts)
}

/// Assemble a bundle around externally supplied partitionings (one per
/// resolution).
pub fn bundle_with_partitions(
    mesh: &Mesh,
    cfg: &ModelConfig,
    parts: Vec<Partitioning>,
) -> Result<PrecomputeBundle> {
    let resolutions = cfg.resolutions();
    if parts.len() != resolutions.len() {
        return Err(Error::Config(format!(
            "{} partitionings supplied for {} resolutions",
            parts.len(),
            resolutions.len()
        )));
    }
    let normalized = normalize_mesh(mesh)?;
    let n = normalized.n_vertices();
    let ops = cotan_laplacian(&normalized)?;
    let k = cfg.k_eig.min(n);
    let basis = Rc::new(eigendecompose(&ops, k)?);
    let ts = log_time_samples(cfg.hks_t_min, cfg.hks_t_max, cfg.hks_count)?;
    let hks = compute_hks(&basis, &ts).values().clone();

    let eg = edge_graph(&normalized);
    let mut patch_hks = Vec::new();
    let mut masks = Vec::new();
    for part in &parts {
        patch_hks.push(patch_average(part, &hks));
        let mask = match cfg.mask_radius {
            Some(r) if r.is_finite() => {
                let g = supernode_geodesics(&eg, part)?;
                Some(build_mask(&g, r)?)
            }
            _ => None,
        };
        masks.push(mask);
    }

    let xyz = Mat::from_fn(n, 3, |i, j| normalized.vertex(i)[j]);
    Ok(PrecomputeBundle {
        mesh_hash: mesh.content_hash(),
        xyz,
        basis,
        hks,
        parts,
        patch_hks,
        masks,
    })
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

enum Backbone {
    Vanilla(Vec<MlpBlock>),
    Diffusion(Vec<DiffusionBlock>),
}

struct ResolutionStack {
    aggregate: PatchAggregate,
    se_proj: Option<Linear>,
    blocks: Vec<TransformerBlock>,
    cross: CrossAttentionInteract,
}

enum Head {
    Segmentation(Linear),
    Classification(Linear),
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    input_proj: Linear,
    backbone: Backbone,
    stacks: Vec<ResolutionStack>,
    head: Head,
}

/// Assemble the full pipeline for a configuration; parameter initialization
/// is seeded from the config.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut ps = ParamSet::default();
    let mut init_rng: ChaCha8Rng = rng::seeded(cfg.seed);
    let d = cfg.layers.hidden_dim;

    let input_proj = Linear::new(&mut ps, "input_proj", cfg.input_dim(), d, &mut init_rng);
    let backbone = match cfg.layers.backbone {
        BackboneKind::Vanilla => Backbone::Vanilla(
            (0..cfg.layers.n_backbone_layers)
                .map(|i| {
                    MlpBlock::new(
                        &mut ps,
                        &format!("backbone.{i}"),
                        d,
                        cfg.layers.dropout_p,
                        &mut init_rng,
                    )
                })
                .collect(),
        ),
        BackboneKind::Diffusion => Backbone::Diffusion(
            (0..cfg.layers.n_backbone_layers)
                .map(|i| {
                    DiffusionBlock::new(
                        &mut ps,
                        &format!("backbone.{i}"),
                        d,
                        cfg.layers.dropout_p,
                        &mut init_rng,
                    )
                })
                .collect(),
        ),
    };

    let mut stacks = Vec::new();
    for (ri, _p) in cfg.resolutions().iter().enumerate() {
        let aggregate = PatchAggregate::new(&mut ps, &format!("res{ri}.aggregate"), d, &mut init_rng);
        let se_proj = cfg.hks_se.then(|| {
            Linear::new(
                &mut ps,
                &format!("res{ri}.se_proj"),
                cfg.hks_count,
                d,
                &mut init_rng,
            )
        });
        let blocks = (0..cfg.layers.n_transformer_layers)
            .map(|i| {
                TransformerBlock::new(
                    &mut ps,
                    &format!("res{ri}.transformer.{i}"),
                    d,
                    cfg.layers.n_heads,
                    &mut init_rng,
                )
            })
            .collect();
        let cross = CrossAttentionInteract::new(
            &mut ps,
            &format!("res{ri}.cross"),
            d,
            cfg.layers.n_heads,
            &mut init_rng,
        );
        stacks.push(ResolutionStack {
            aggregate,
            se_proj,
            blocks,
            cross,
        });
    }

    let head = match cfg.task {
        TaskKind::Segmentation => Head::Segmentation(Linear::new(
            &mut ps,
            "head.seg",
            2 * d,
            cfg.n_classes,
            &mut init_rng,
        )),
        TaskKind::Classification => Head::Classification(Linear::new(
            &mut ps,
            "head.cls",
            d,
            cfg.n_classes,
            &mut init_rng,
        )),
    };

    Ok(Model {
        cfg: cfg.clone(),
        params: ps,
        input_proj,
        backbone,
        stacks,
        head,
    })
}

impl Model {
    pub fn parameter_count(&self) -> usize {
        self.params.n_scalars()
    }

    /// One forward pass on a fresh tape. Returns the tape, the bound
    /// parameters, and the logits (N x C for segmentation, 1 x C for
    /// classification).
    pub fn forward(
        &self,
        mesh: &Mesh,
        bundle: &PrecomputeBundle,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tape, Bound, TensorId)> {
        if mesh.content_hash() != bundle.mesh_hash {
            return Err(Error::StaleCache(format!(
                "precompute bundle was built for mesh {:016x}, got {:016x}",
                bundle.mesh_hash,
                mesh.content_hash()
            )));
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape);

        let feats = match self.cfg.input_features {
            InputFeatures::Hks => bundle.hks.clone(),
            InputFeatures::Xyz => bundle.xyz.clone(),
        };
        let x0 = tape.leaf(feats);
        let mut x = self.input_proj.forward(&tape, &bound, x0)?;
        match &self.backbone {
            Backbone::Vanilla(blocks) => {
                for b in blocks {
                    x = b.forward(&tape, &bound, x, train, rng)?;
                }
            }
            Backbone::Diffusion(blocks) => {
                for b in blocks {
                    x = b.forward(&tape, &bound, x, &bundle.basis, train, rng)?;
                }
            }
        }

        let mut res_tokens = Vec::with_capacity(self.stacks.len());
        for (ri, stack) in self.stacks.iter().enumerate() {
            let part = &bundle.parts[ri];
            let mut tokens = stack.aggregate.forward(&tape, &bound, x, part)?;
            if let Some(se) = &stack.se_proj {
                let se_in = tape.leaf(bundle.patch_hks[ri].clone());
                let se_toks = se.forward(&tape, &bound, se_in)?;
                tokens = tape.add(tokens, se_toks)?;
            }
            for block in &stack.blocks {
                tokens = block.forward(&tape, &bound, tokens, bundle.masks[ri].as_ref())?;
            }
            let f = stack.cross.forward(&tape, &bound, tokens, x)?;
            res_tokens.push(f);
        }

        let logits = match &self.head {
            Head::Segmentation(lin) => {
                let parts: Vec<&Partitioning> = bundle.parts.iter().collect();
                let lifted = patch_to_node_multi(&tape, &res_tokens, &parts)?;
                let cat = tape.concat_cols(lifted, x)?;
                lin.forward(&tape, &bound, cat)?
            }
            Head::Classification(lin) => {
                let mut pooled = tape.mean_rows(res_tokens[0])?;
                for &f in &res_tokens[1..] {
                    let p = tape.mean_rows(f)?;
                    pooled = tape.add(pooled, p)?;
                }
                lin.forward(&tape, &bound, pooled)?
            }
        };
        Ok((tape, bound, logits))
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        save_checkpoint(
            dir,
            self.params.names(),
            self.params.values(),
            serde_json::to_value(&self.cfg)?,
            self.cfg.seed,
        )
    }

    /// Rebuild a model from a checkpoint directory; the config is embedded
    /// in the manifest.
    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Model> {
        let ck = load_checkpoint(dir)?;
        let cfg: ModelConfig = serde_json::from_value(ck.manifest.hyperparameters.clone())?;
        let mut model = build_model(&cfg)?;
        if ck.manifest.params.len() != model.params.len() {
            return Err(Error::StaleCache(format!(
                "checkpoint has {} parameters, model expects {}",
                ck.manifest.params.len(),
                model.params.len()
            )));
        }
        for (i, rec) in ck.manifest.params.iter().enumerate() {
            if rec.name != model.params.names()[i] {
                return Err(Error::StaleCache(format!(
                    "parameter {i} is '{}' in the checkpoint but '{}' in the model",
                    rec.name,
                    model.params.names()[i]
                )));
            }
            model.params.values_mut()[i] = ck.values[i].clone();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            layers: LayerConfig {
                hidden_dim: 16,
                n_heads: 2,
                dropout_p: 0.0,
                n_backbone_layers: 2,
                n_transformer_layers: 1,
                backbone: BackboneKind::Vanilla,
            },
            n_classes: 4,
            partitions: 6,
            k_eig: 12,
            hks_count: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn vanilla_model_lists_expected_parameters() {
        let model = build_model(&small_cfg()).unwrap();
        let names = model.params.names();
        assert!(names.iter().any(|n| n == "input_proj.weight"));
        assert!(names.iter().any(|n| n == "backbone.0.lin.weight"));
        assert!(names.iter().any(|n| n == "backbone.1.lin.weight"));
        assert!(names.iter().any(|n| n == "res0.transformer.0.mha.wq.weight"));
        assert!(names.iter().any(|n| n == "res0.cross.interaction_scale"));
        assert!(names.iter().any(|n| n == "head.seg.weight"));
        // vanilla backbone has no diffusion times
        assert!(!names.iter().any(|n| n.contains("time_raw")));
    }

    #[test]
    fn diffusion_model_has_time_parameters_per_layer() {
        let mut cfg = small_cfg();
        cfg.layers.backbone = BackboneKind::Diffusion;
        cfg.layers.n_backbone_layers = 4;
        cfg.layers.n_transformer_layers = 2;
        let model = build_model(&cfg).unwrap();
        let times: Vec<&String> = model
            .params
            .names()
            .iter()
            .filter(|n| n.ends_with("time_raw"))
            .collect();
        assert_eq!(times.len(), 4);
        let tblocks: std::collections::HashSet<&str> = model
            .params
            .names()
            .iter()
            .filter(|n| n.contains("transformer"))
            .map(|n| n.split(".mha").next().unwrap_or(n))
            .map(|n| n.split(".norm").next().unwrap_or(n))
            .map(|n| n.split(".ffn").next().unwrap_or(n))
            .collect();
        assert_eq!(tblocks.len(), 2);
    }

    #[test]
    fn classification_head_shape_is_one_by_classes() {
        let mut cfg = small_cfg();
        cfg.task = TaskKind::Classification;
        cfg.input_features = InputFeatures::Hks;
        let model = build_model(&cfg).unwrap();
        let mesh = shapes::icosphere(1, 1.0);
        let bundle = precompute_bundle(&mesh, &cfg).unwrap();
        let mut r = rng::seeded(0);
        let (tape, _, logits) = model.forward(&mesh, &bundle, false, &mut r).unwrap();
        assert_eq!(tape.shape(logits), (1, 4));
    }

    #[test]
    fn segmentation_logits_have_node_rows_and_eval_is_deterministic() {
        let cfg = small_cfg();
        let model = build_model(&cfg).unwrap();
        let mesh = shapes::icosphere(1, 1.0);
        let bundle = precompute_bundle(&mesh, &cfg).unwrap();
        let mut r = rng::seeded(0);
        let (tape1, _, l1) = model.forward(&mesh, &bundle, false, &mut r).unwrap();
        assert_eq!(tape1.shape(l1), (42, 4));
        let mut r2 = rng::seeded(99);
        let (tape2, _, l2) = model.forward(&mesh, &bundle, false, &mut r2).unwrap();
        assert_eq!(*tape1.value(l1), *tape2.value(l2), "eval must be bitwise deterministic");
    }

    #[test]
    fn stale_bundle_is_rejected() {
        let cfg = small_cfg();
        let model = build_model(&cfg).unwrap();
        let mesh = shapes::icosphere(1, 1.0);
        let other = shapes::icosphere(1, 2.0);
        let bundle = precompute_bundle(&other, &cfg).unwrap();
        let mut r = rng::seeded(0);
        let err = model.forward(&mesh, &bundle, false, &mut r).err().unwrap();
        assert!(matches!(err, Error::StaleCache(_)));
    }

    #[test]
    fn permuted_mesh_with_permuted_bundle_permutes_logits() {
        use rand::seq::SliceRandom;
        let cfg = small_cfg();
        let model = build_model(&cfg).unwrap();
        let mesh = shapes::blob(1, 12);
        let bundle = precompute_bundle(&mesh, &cfg).unwrap();
        let mut r = rng::seeded(0);
        let (tape, _, logits) = model.forward(&mesh, &bundle, false, &mut r).unwrap();
        let base = (*tape.value(logits)).clone();

        let n = mesh.n_vertices();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::seeded(5));
        let pmesh = mesh.permuted(&perm).unwrap();
        let pbundle = bundle.permuted(&perm, pmesh.content_hash()).unwrap();
        let mut r = rng::seeded(0);
        let (ptape, _, plogits) = model.forward(&pmesh, &pbundle, false, &mut r).unwrap();
        let pvals = (*ptape.value(plogits)).clone();

        let mut max_err = 0.0f64;
        for i in 0..n {
            for j in 0..4 {
                max_err = max_err.max((pvals.at(perm[i], j) - base.at(i, j)).abs());
            }
        }
        assert!(
            max_err < 1e-10 * base.max_abs().max(1.0),
            "permutation equivariance error {max_err}"
        );
    }

    #[test]
    fn checkpoint_roundtrip_preserves_logits() {
        let cfg = small_cfg();
        let model = build_model(&cfg).unwrap();
        let dir = std::env::temp_dir().join("geotok-model-ckpt");
        model.save(&dir).unwrap();
        let loaded = Model::load(&dir).unwrap();
        let mesh = shapes::icosphere(1, 1.0);
        let bundle = precompute_bundle(&mesh, &cfg).unwrap();
        let mut r = rng::seeded(0);
        let (t1, _, l1) = model.forward(&mesh, &bundle, false, &mut r).unwrap();
        let mut r = rng::seeded(0);
        let (t2, _, l2) = loaded.forward(&mesh, &bundle, false, &mut r).unwrap();
        assert_eq!(*t1.value(l1), *t2.value(l2));
    }

    #[test]
    fn multi_res_shapes_work() {
        let mut cfg = small_cfg();
        cfg.multi_res = vec![4, 10];
        let model = build_model(&cfg).unwrap();
        let mesh = shapes::icosphere(1, 1.0);
        let bundle = precompute_bundle(&mesh, &cfg).unwrap();
        assert_eq!(bundle.parts.len(), 2);
        let mut r = rng::seeded(0);
        let (tape, _, logits) = model.forward(&mesh, &bundle, false, &mut r).unwrap();
        assert_eq!(tape.shape(logits), (42, 4));
    }
}

//! On-disk precompute cache: per-mesh directories holding little-endian
//! float64 arrays (`eigenvalues`, `eigenvectors`, `mass_diag`, `hks`,
//! `geodesic-*`) plus JSON manifests. Entries are keyed by the mesh content
//! hash and invalidated on mismatch.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{build_mask, supernode_geodesics, GeodesicMatrix};
use crate::linalg::Mat;
use crate::mesh::{edge_graph, normalize_mesh, Mesh};
use crate::model::{compute_partitions, ModelConfig, PartitionMethod, PrecomputeBundle};
use crate::spectral::SpectralBasis;
use crate::tokenize::{load_assignment, patch_average, save_assignment, Partitioning};

pub const CACHE_ENV_VAR: &str = "GEOTOK_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    ComputeIfMissing,
    /// Fail with an actionable error when anything is missing; used by the
    /// training and evaluation commands.
    RequireCached,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct SpectralManifest {
    format_version: u32,
    n: usize,
    mesh_hash: String,
    k_eig: usize,
    hks_count: usize,
    hks_t_min: f64,
    hks_t_max: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct GeodesicMeta {
    roots_hash: String,
    p: usize,
}

pub struct PrecomputeCache {
    root: PathBuf,
}

impl PrecomputeCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        PrecomputeCache { root: root.into() }
    }

    /// Honor the environment override, falling back to `default_root`.
    pub fn from_env_or(default_root: impl Into<PathBuf>) -> Self {
        match std::env::var_os(CACHE_ENV_VAR) {
            Some(dir) if !dir.is_empty() => PrecomputeCache::new(PathBuf::from(dir)),
            _ => PrecomputeCache::new(default_root),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn mesh_dir(&self, stem: &str, hash: u64) -> PathBuf {
        self.root.join(format!("{stem}-{hash:016x}"))
    }

    /// Load or compute the full bundle for one mesh. Returns the bundle and
    /// whether every artifact came from cache.
    pub fn bundle(
        &self,
        mesh: &Mesh,
        stem: &str,
        cfg: &ModelConfig,
        policy: CachePolicy,
    ) -> Result<(PrecomputeBundle, bool)> {
        if cfg.partition_method == PartitionMethod::Import {
            return Err(Error::Config(
                "imported partitions bypass the cache; assemble the bundle explicitly".into(),
            ));
        }
        let hash = mesh.content_hash();
        let dir = self.mesh_dir(stem, hash);
        let normalized = normalize_mesh(mesh)?;
        let n = normalized.n_vertices();
        let k = cfg.k_eig.min(n);
        let mut all_hits = true;

        let (basis, hks) = match self.try_load_spectral(&dir, hash, n, k, cfg) {
            Some(loaded) => loaded,
            None => {
                if policy == CachePolicy::RequireCached {
                    return Err(Error::StaleCache(format!(
                        "no spectral cache for mesh '{stem}' ({hash:016x}); run the precompute command first"
                    )));
                }
                all_hits = false;
                let ops = crate::mesh::cotan_laplacian(&normalized)?;
                let basis = crate::spectral::eigendecompose(&ops, k)?;
                let ts =
                    crate::spectral::log_time_samples(cfg.hks_t_min, cfg.hks_t_max, cfg.hks_count)?;
                let hks = crate::spectral::compute_hks(&basis, &ts).values().clone();
                self.save_spectral(&dir, hash, n, k, cfg, &basis, &hks)?;
                (basis, hks)
            }
        };
        let basis = Rc::new(basis);

        let method_tag = match cfg.partition_method {
            PartitionMethod::Rns => "rns",
            PartitionMethod::Baseline => "baseline",
            PartitionMethod::Import => unreachable!(),
        };
        let mut parts: Vec<Partitioning> = Vec::new();
        let mut missing_res = Vec::new();
        for &p in &cfg.resolutions() {
            let path = dir.join(format!("part-{method_tag}-p{p}.json"));
            match self.try_load_partition(&path, mesh) {
                Some(part) => parts.push(part),
                None => missing_res.push((parts.len() + missing_res.len(), p, path)),
            }
        }
        if !missing_res.is_empty() {
            if policy == CachePolicy::RequireCached {
                return Err(Error::StaleCache(format!(
                    "no cached partition for mesh '{stem}' at P={}; run the precompute command first",
                    missing_res[0].1
                )));
            }
            all_hits = false;
            let fresh = compute_partitions(mesh, cfg)?;
            for (slot, _p, path) in &missing_res {
                save_assignment(path, &fresh[*slot])?;
            }
            parts = fresh;
        }

        let eg = edge_graph(&normalized);
        let mut masks = Vec::new();
        let mut patch_hks = Vec::new();
        for part in &parts {
            patch_hks.push(patch_average(part, &hks));
            let mask = match cfg.mask_radius {
                Some(r) if r.is_finite() => {
                    let gname = format!("geodesic-{method_tag}-p{}", part.p());
                    let g = match self.try_load_geodesic(&dir, &gname, part) {
                        Some(g) => g,
                        None => {
                            if policy == CachePolicy::RequireCached {
                                return Err(Error::StaleCache(format!(
                                    "no cached geodesics for mesh '{stem}' at P={}; run the precompute command first",
                                    part.p()
                                )));
                            }
                            all_hits = false;
                            let g = supernode_geodesics(&eg, part)?;
                            self.save_geodesic(&dir, &gname, part, &g)?;
                            g
                        }
                    };
                    Some(build_mask(&g, r)?)
                }
                _ => None,
            };
            masks.push(mask);
        }

        let xyz = Mat::from_fn(n, 3, |i, j| normalized.vertex(i)[j]);
        Ok((
            PrecomputeBundle {
                mesh_hash: hash,
                xyz,
                basis,
                hks,
                parts,
                patch_hks,
                masks,
            },
            all_hits,
        ))
    }

    fn try_load_spectral(
        &self,
        dir: &Path,
        hash: u64,
        n: usize,
        k: usize,
        cfg: &ModelConfig,
    ) -> Option<(SpectralBasis, Mat)> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return None;
        }
        let load = || -> Result<(SpectralBasis, Mat)> {
            let manifest: SpectralManifest =
                serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
            let expect = SpectralManifest {
                format_version: 1,
                n,
                mesh_hash: format!("{hash:016x}"),
                k_eig: k,
                hks_count: cfg.hks_count,
                hks_t_min: cfg.hks_t_min,
                hks_t_max: cfg.hks_t_max,
            };
            if manifest != expect {
                return Err(Error::StaleCache(format!(
                    "spectral manifest mismatch: {manifest:?} vs {expect:?}"
                )));
            }
            let eigenvalues = read_f64_array(&dir.join("eigenvalues"), k)?;
            let eigenvectors = read_f64_array(&dir.join("eigenvectors"), n * k)?;
            let mass = read_f64_array(&dir.join("mass_diag"), n)?;
            let hks = read_f64_array(&dir.join("hks"), n * cfg.hks_count)?;
            Ok((
                SpectralBasis::new(eigenvalues, Mat::from_vec(n, k, eigenvectors), mass),
                Mat::from_vec(n, cfg.hks_count, hks),
            ))
        };
        match load() {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("discarding unusable spectral cache in {}: {e}", dir.display());
                None
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn save_spectral(
        &self,
        dir: &Path,
        hash: u64,
        n: usize,
        k: usize,
        cfg: &ModelConfig,
        basis: &SpectralBasis,
        hks: &Mat,
    ) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_f64_array(&dir.join("eigenvalues"), basis.eigenvalues())?;
        write_f64_array(&dir.join("eigenvectors"), basis.eigenvectors().data())?;
        write_f64_array(&dir.join("mass_diag"), basis.mass())?;
        write_f64_array(&dir.join("hks"), hks.data())?;
        let manifest = SpectralManifest {
            format_version: 1,
            n,
            mesh_hash: format!("{hash:016x}"),
            k_eig: k,
            hks_count: cfg.hks_count,
            hks_t_min: cfg.hks_t_min,
            hks_t_max: cfg.hks_t_max,
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    fn try_load_partition(&self, path: &Path, mesh: &Mesh) -> Option<Partitioning> {
        if !path.exists() {
            return None;
        }
        match load_assignment(path, mesh) {
            Ok(p) => Some(p),
            Err(e) => {
                log::warn!("discarding unusable partition cache {}: {e}", path.display());
                None
            }
        }
    }

    fn try_load_geodesic(&self, dir: &Path, name: &str, part: &Partitioning) -> Option<GeodesicMatrix> {
        let data_path = dir.join(name);
        let meta_path = dir.join(format!("{name}.json"));
        if !data_path.exists() || !meta_path.exists() {
            return None;
        }
        let load = || -> Result<GeodesicMatrix> {
            let meta: GeodesicMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
            let expect = GeodesicMeta {
                roots_hash: roots_hash(part.roots()),
                p: part.p(),
            };
            if meta != expect {
                return Err(Error::StaleCache("geodesic roots changed".into()));
            }
            let data = read_f64_array(&data_path, part.p() * part.p())?;
            GeodesicMatrix::from_mat(Mat::from_vec(part.p(), part.p(), data))
        };
        match load() {
            Ok(g) => Some(g),
            Err(e) => {
                log::warn!("discarding unusable geodesic cache {}: {e}", data_path.display());
                None
            }
        }
    }

    fn save_geodesic(
        &self,
        dir: &Path,
        name: &str,
        part: &Partitioning,
        g: &GeodesicMatrix,
    ) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_f64_array(&dir.join(name), g.as_mat().data())?;
        let meta = GeodesicMeta {
            roots_hash: roots_hash(part.roots()),
            p: part.p(),
        };
        std::fs::write(
            dir.join(format!("{name}.json")),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(())
    }
}

fn roots_hash(roots: &[usize]) -> String {
    let mut h = 0xcbf29ce484222325u64;
    for &r in roots {
        for b in (r as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    format!("{h:016x}")
}

fn write_f64_array(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

fn read_f64_array(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != expected_len * 8 {
        return Err(Error::StaleCache(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected_len * 8
        )));
    }
    let mut out = Vec::with_capacity(expected_len);
    for chunk in bytes.chunks_exact(8) {
        out.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(out)
}

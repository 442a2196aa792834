//! The six subcommands: precompute, spectrum-check, partition, train,
//! eval, export.

use std::path::{Path, PathBuf};

use geotok_core::cache::{CachePolicy, PrecomputeCache};
use geotok_core::dataset::{generate_toy_dataset, ToyDataset};
use geotok_core::error::{Error, Result};
use geotok_core::mesh::{
    categorical_color, cotan_laplacian, diverging_color, load_mesh, normalize_mesh, write_off,
    write_ply_colored, Mesh,
};
use geotok_core::model::{
    build_model, bundle_with_partitions, Model, PartitionMethod, PrecomputeBundle,
};
use geotok_core::spectral::{eigendecompose, log_time_samples};
use geotok_core::tokenize::{
    baseline_partition, coarsen_operators, edge_distances, load_assignment, prolongate,
    root_node_partition, save_assignment, spectral_preservation_report, ClampMode, Partitioning,
};
use geotok_core::train::{evaluate, metrics_csv, train};

use crate::config::{parse_mask_radius, RunConfig};
use crate::manifest::RunManifest;
use crate::{Cli, MethodArg};

pub struct Context {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub cache: PrecomputeCache,
    pub dry_run: bool,
}

impl Context {
    pub fn from_cli(cli: &Cli) -> Result<Context> {
        let mut config = match &cli.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        // flags win over file values
        if let Some(seed) = cli.seed {
            config.model.seed = seed;
        }
        if let Some(p) = cli.partitions {
            config.model.partitions = p;
        }
        if let Some(m) = cli.method {
            config.model.partition_method = match m {
                MethodArg::Rns => PartitionMethod::Rns,
                MethodArg::Baseline => PartitionMethod::Baseline,
                MethodArg::Import => PartitionMethod::Import,
            };
        }
        if let Some(r) = &cli.mask_radius {
            config.model.mask_radius = parse_mask_radius(r)?;
        }
        if let Some(k) = cli.k_eig {
            config.model.k_eig = k;
        }
        // the dataset dictates the task shape
        if let Some(ds) = &config.dataset {
            config.model.task = ds.kind.task();
            config.model.n_classes = ds.kind.n_classes();
        }
        config.model.validate()?;
        let out_dir = cli
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("geotok-out"));
        let cache = PrecomputeCache::from_env_or(out_dir.join("cache"));
        Ok(Context {
            config,
            out_dir,
            cache,
            dry_run: cli.dry_run,
        })
    }

    fn dataset(&self) -> Result<(ToyDataset, Vec<String>)> {
        let ds_cfg = self.config.dataset.as_ref().ok_or_else(|| {
            Error::Config("this command needs a [dataset] section in the config".into())
        })?;
        let ds = generate_toy_dataset(ds_cfg.kind, ds_cfg.n_items, ds_cfg.seed)?;
        let stems = (0..ds.items.len())
            .map(|i| format!("item-{i:03}"))
            .collect();
        Ok((ds, stems))
    }
}

/// Write the generated dataset as OFF files plus label JSON for
/// inspection; the cache itself is keyed off in-memory content.
fn materialize_dataset(ctx: &Context, ds: &ToyDataset, stems: &[String]) -> Result<()> {
    let data_dir = ctx.out_dir.join("data");
    std::fs::create_dir_all(&data_dir)?;
    for (item, stem) in ds.items.iter().zip(stems) {
        write_off(data_dir.join(format!("{stem}.off")), &item.mesh)?;
        std::fs::write(
            data_dir.join(format!("{stem}.labels.json")),
            serde_json::to_string(&item.labels)?,
        )?;
    }
    Ok(())
}

pub fn cmd_precompute(ctx: &Context, meshes: &[PathBuf], jobs: usize) -> Result<()> {
    let mut manifest = RunManifest::start("precompute", &ctx.config);
    if ctx.dry_run {
        println!("{}", ctx.config.to_toml()?);
        return Ok(());
    }

    // (stem, mesh) pairs from files or from the configured dataset
    let mut work: Vec<(String, Mesh)> = Vec::new();
    if meshes.is_empty() {
        let (ds, stems) = ctx.dataset()?;
        materialize_dataset(ctx, &ds, &stems)?;
        for (item, stem) in ds.items.into_iter().zip(stems) {
            work.push((stem, item.mesh));
        }
    } else {
        for path in meshes {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("mesh")
                .to_string();
            work.push((stem, load_mesh(path)?));
        }
    }
    for (stem, mesh) in &work {
        manifest.record_input(stem, mesh.content_hash());
    }

    let jobs = jobs.max(1).min(work.len().max(1));
    let cfg = &ctx.config.model;
    let cache = &ctx.cache;
    let results: Vec<(String, Result<bool>)> = if jobs == 1 {
        work.iter()
            .map(|(stem, mesh)| {
                let r = cache
                    .bundle(mesh, stem, cfg, CachePolicy::ComputeIfMissing)
                    .map(|(_, hit)| hit);
                (stem.clone(), r)
            })
            .collect()
    } else {
        // parallel across meshes only; each worker owns its chunk
        std::thread::scope(|scope| {
            let chunk = work.len().div_ceil(jobs);
            let handles: Vec<_> = work
                .chunks(chunk)
                .map(|slice| {
                    scope.spawn(move || {
                        slice
                            .iter()
                            .map(|(stem, mesh)| {
                                let r = cache
                                    .bundle(mesh, stem, cfg, CachePolicy::ComputeIfMissing)
                                    .map(|(_, hit)| hit);
                                (stem.clone(), r)
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("precompute worker panicked"))
                .collect()
        })
    };

    let mut failures = 0;
    for (stem, result) in &results {
        match result {
            Ok(true) => println!("{stem}: cache hit"),
            Ok(false) => println!("{stem}: computed"),
            Err(e) => {
                failures += 1;
                eprintln!("{stem}: {e}");
            }
        }
    }
    manifest.finish(&ctx.out_dir)?;
    if failures > 0 {
        return Err(Error::validation(format!(
            "{failures} of {} meshes failed to precompute",
            results.len()
        )));
    }
    println!("precompute done: {} meshes, cache at {}", results.len(), ctx.cache.root().display());
    Ok(())
}

pub fn cmd_spectrum_check(ctx: &Context, mesh_path: &Path, report_k: usize) -> Result<()> {
    let mut manifest = RunManifest::start("spectrum-check", &ctx.config);
    if ctx.dry_run {
        println!("{}", ctx.config.to_toml()?);
        return Ok(());
    }
    let cfg = &ctx.config.model;
    let mesh = load_mesh(mesh_path)?;
    manifest.record_input(mesh_path, mesh.content_hash());
    let p = cfg.partitions;
    if report_k > p {
        return Err(Error::domain(format!(
            "report_k = {report_k} exceeds partition count {p}"
        )));
    }
    let normalized = normalize_mesh(&mesh)?;
    let ops = cotan_laplacian(&normalized)?;
    let dg = edge_distances(&ops, ClampMode::Exclude);
    let rns = root_node_partition(&dg, p, cfg.seed, 10)?;
    let baseline = baseline_partition(&normalized, p, cfg.seed)?;
    let ts = log_time_samples(cfg.hks_t_min, cfg.hks_t_max, cfg.hks_count)?;

    let rns_report = spectral_preservation_report(&mesh, &rns, report_k, &ts)?;
    let baseline_report = spectral_preservation_report(&mesh, &baseline, report_k, &ts)?;

    std::fs::create_dir_all(&ctx.out_dir)?;
    let json = serde_json::json!({
        "mesh": mesh_path.display().to_string(),
        "p": p,
        "k": report_k,
        "rns": rns_report,
        "baseline": baseline_report,
    });
    std::fs::write(
        ctx.out_dir.join("spectrum-check.json"),
        serde_json::to_string_pretty(&json)?,
    )?;

    // visualizations: partition coloring plus prolonged eigenfunctions
    for (tag, part) in [("rns", &rns), ("baseline", &baseline)] {
        let colors: Vec<[u8; 3]> = part
            .assignment()
            .iter()
            .map(|&pid| categorical_color(pid))
            .collect();
        write_ply_colored(
            ctx.out_dir.join(format!("partition-{tag}.ply")),
            &normalized,
            &colors,
        )?;
        let coarse_ops = coarsen_operators(part, &ops);
        let coarse = eigendecompose(&coarse_ops, (report_k + 1).min(part.p()))?;
        let viz_k = report_k.min(3);
        for k in 1..=viz_k {
            let col = geotok_core::linalg::Mat::col_vec(&coarse.eigenvectors().column(k));
            let lifted = prolongate(part, &col);
            let amax = lifted.max_abs().max(1e-12);
            let colors: Vec<[u8; 3]> = (0..lifted.rows())
                .map(|i| diverging_color(lifted.at(i, 0), -amax, amax))
                .collect();
            write_ply_colored(
                ctx.out_dir.join(format!("eigfn-{tag}-{k}.ply")),
                &normalized,
                &colors,
            )?;
        }
    }

    println!(
        "spectrum check (P={p}, K={report_k}):\n  rns:      mean angle {:.4} rad, hks err {:.4}\n  baseline: mean angle {:.4} rad, hks err {:.4}",
        rns_report.mean_principal_angle,
        rns_report.hks_rel_err,
        baseline_report.mean_principal_angle,
        baseline_report.hks_rel_err
    );
    manifest.finish(&ctx.out_dir)?;
    Ok(())
}

pub fn cmd_partition(ctx: &Context, mesh_path: &Path, assignment: Option<&Path>) -> Result<()> {
    let mut manifest = RunManifest::start("partition", &ctx.config);
    if ctx.dry_run {
        println!("{}", ctx.config.to_toml()?);
        return Ok(());
    }
    let cfg = &ctx.config.model;
    let mesh = load_mesh(mesh_path)?;
    manifest.record_input(mesh_path, mesh.content_hash());
    let normalized = normalize_mesh(&mesh)?;
    let part = match cfg.partition_method {
        PartitionMethod::Rns => {
            let ops = cotan_laplacian(&normalized)?;
            let dg = edge_distances(&ops, ClampMode::Exclude);
            root_node_partition(&dg, cfg.partitions, cfg.seed, 10)?
        }
        PartitionMethod::Baseline => baseline_partition(&normalized, cfg.partitions, cfg.seed)?,
        PartitionMethod::Import => {
            let path = assignment.ok_or_else(|| {
                Error::Config("--method import requires --assignment <file>".into())
            })?;
            load_assignment(path, &mesh)?
        }
    };
    std::fs::create_dir_all(&ctx.out_dir)?;
    save_assignment(ctx.out_dir.join("assignment.json"), &part)?;
    let colors: Vec<[u8; 3]> = part
        .assignment()
        .iter()
        .map(|&pid| categorical_color(pid))
        .collect();
    write_ply_colored(ctx.out_dir.join("partition.ply"), &normalized, &colors)?;
    let sizes: Vec<usize> = part.members().iter().map(|m| m.len()).collect();
    println!(
        "partitioned {} vertices into {} patches (sizes {}..{})",
        part.n(),
        part.p(),
        sizes.iter().min().unwrap(),
        sizes.iter().max().unwrap()
    );
    manifest.finish(&ctx.out_dir)?;
    Ok(())
}

/// Bundles for every dataset item, strictly from cache.
fn cached_bundles(
    ctx: &Context,
    ds: &ToyDataset,
    stems: &[String],
) -> Result<Vec<PrecomputeBundle>> {
    let cfg = &ctx.config.model;
    ds.items
        .iter()
        .zip(stems)
        .map(|(item, stem)| {
            ctx.cache
                .bundle(&item.mesh, stem, cfg, CachePolicy::RequireCached)
                .map(|(b, _)| b)
        })
        .collect()
}

pub fn cmd_train(ctx: &Context) -> Result<()> {
    let mut manifest = RunManifest::start("train", &ctx.config);
    let cfg = &ctx.config.model;
    if ctx.dry_run {
        let model = build_model(cfg)?;
        println!("{}", ctx.config.to_toml()?);
        println!("parameters: {}", model.parameter_count());
        return Ok(());
    }
    let (ds, stems) = ctx.dataset()?;
    for (stem, item) in stems.iter().zip(&ds.items) {
        manifest.record_input(stem, item.mesh.content_hash());
    }
    let bundles = cached_bundles(ctx, &ds, &stems)?;
    let outcome = train(cfg, &ds, &bundles)?;

    std::fs::create_dir_all(&ctx.out_dir)?;
    std::fs::write(ctx.out_dir.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
    outcome.model.save(ctx.out_dir.join("checkpoint"))?;
    let final_train = outcome
        .metrics
        .iter()
        .rev()
        .find(|m| m.split == "train")
        .map(|m| m.accuracy)
        .unwrap_or(0.0);
    println!(
        "trained {} epochs: final train accuracy {:.4}, best test accuracy {:.4} (epoch {})",
        cfg.epochs, final_train, outcome.best_accuracy, outcome.best_epoch
    );
    manifest.finish(&ctx.out_dir)?;
    Ok(())
}

pub fn cmd_eval(ctx: &Context, checkpoint: Option<&Path>) -> Result<()> {
    let mut manifest = RunManifest::start("eval", &ctx.config);
    if ctx.dry_run {
        println!("{}", ctx.config.to_toml()?);
        return Ok(());
    }
    let ckpt_dir = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.out_dir.join("checkpoint"));
    let model = Model::load(&ckpt_dir)?;
    let (ds, stems) = ctx.dataset()?;
    for (stem, item) in stems.iter().zip(&ds.items) {
        manifest.record_input(stem, item.mesh.content_hash());
    }
    // bundles must match the checkpoint's own configuration
    let eval_ctx = Context {
        config: RunConfig {
            model: model.cfg.clone(),
            dataset: ctx.config.dataset.clone(),
        },
        out_dir: ctx.out_dir.clone(),
        cache: PrecomputeCache::new(ctx.cache.root()),
        dry_run: false,
    };
    let bundles = cached_bundles(&eval_ctx, &ds, &stems)?;
    let report = evaluate(&model, &ds, &bundles, &ds.test_idx)?;
    std::fs::create_dir_all(&ctx.out_dir)?;
    std::fs::write(
        ctx.out_dir.join("eval.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "eval: accuracy {:.4} over {} predictions",
        report.accuracy, report.n_total
    );
    for (c, acc) in report.per_class.iter().enumerate() {
        match acc {
            Some(a) => println!("  class {c}: {a:.4}"),
            None => println!("  class {c}: (absent from split)"),
        }
    }
    manifest.finish(&ctx.out_dir)?;
    Ok(())
}

pub fn cmd_export(
    ctx: &Context,
    mesh_path: &Path,
    labels: Option<&Path>,
    assignment: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let mut manifest = RunManifest::start("export", &ctx.config);
    if ctx.dry_run {
        println!("{}", ctx.config.to_toml()?);
        return Ok(());
    }
    let mesh = load_mesh(mesh_path)?;
    manifest.record_input(mesh_path, mesh.content_hash());
    let n = mesh.n_vertices();
    let part: Option<Partitioning> = assignment
        .map(|path| load_assignment(path, &mesh))
        .transpose()?;

    let vertex_labels: Vec<usize> = match (labels, &part) {
        (Some(path), maybe_part) => {
            let values: Vec<usize> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            if values.len() == n {
                values
            } else if let Some(part) = maybe_part {
                if values.len() == part.p() {
                    part.assignment().iter().map(|&pid| values[pid]).collect()
                } else {
                    return Err(Error::domain(format!(
                        "{} labels fit neither {} vertices nor {} patches",
                        values.len(),
                        n,
                        part.p()
                    )));
                }
            } else {
                return Err(Error::domain(format!(
                    "{} labels for {} vertices (pass --assignment for patch-level labels)",
                    values.len(),
                    n
                )));
            }
        }
        (None, Some(part)) => part.assignment().to_vec(),
        (None, None) => {
            return Err(Error::Config(
                "export needs --labels and/or --assignment".into(),
            ))
        }
    };

    let colors: Vec<[u8; 3]> = vertex_labels
        .iter()
        .map(|&l| categorical_color(l))
        .collect();
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.out_dir.join("export.ply"));
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_ply_colored(&out_path, &mesh, &colors)?;
    println!("wrote {}", out_path.display());
    manifest.finish(&ctx.out_dir)?;
    Ok(())
}

/// Bundle assembly for imported partitions (used with --method import).
pub fn import_bundle(
    mesh: &Mesh,
    cfg: &geotok_core::model::ModelConfig,
    assignment_path: &Path,
) -> Result<PrecomputeBundle> {
    let part = load_assignment(assignment_path, mesh)?;
    bundle_with_partitions(mesh, cfg, vec![part])
}

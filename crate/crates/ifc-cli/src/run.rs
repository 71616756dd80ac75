//! Command implementations.

use crate::config::*;
use ifc_core::baselines::{DrcModel, PcaGpModel};
use ifc_core::checkpoint::{load_checkpoint, save_checkpoint, RunMeta, TrainedModel};
use ifc_core::dataset::{load_dataset, save_dataset};
use ifc_core::gpode::{default_fold, fold_shape, GpodeModel, GpodeObjective};
use ifc_core::ifc::{IfcOde2Model, Ode2Objective, SfModel, SfObjective};
use ifc_core::pdegen::{generate_dataset, resample_field, Example, FidelityDataset, PdeKind, PdeSpec};
use ifc_core::rng::RngStreams;
use ifc_core::trainer::{fit, nrmse, FitConfig, TrainReport};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration (exit 1)
    Config(String),
    /// Failure during execution (exit 2)
    Runtime(String),
}

fn cfg<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn rt<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Generate(args) => generate(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::SweepFidelity(args) => sweep(args),
    }
}

fn parse_pde(name: &str) -> Result<PdeKind, CliError> {
    match name {
        "poisson" => Ok(PdeKind::Poisson),
        "heat" => Ok(PdeKind::Heat),
        "burgers" => Ok(PdeKind::Burgers),
        other => Err(CliError::Config(format!(
            "unknown pde {other:?} (expected poisson | heat | burgers)"
        ))),
    }
}

fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let file = FileConfig::load(&args.config).map_err(CliError::Config)?;
    let pde = args
        .pde
        .or_else(|| file.str_field("pde"))
        .ok_or_else(|| CliError::Config("--pde is required".into()))?;
    let meshes_text = args.meshes.or_else(|| file.str_field("meshes")).unwrap_or_else(|| "8,16,32,64".into());
    let counts_text = args.counts.or_else(|| file.str_field("counts")).unwrap_or_else(|| "100,50,20,5".into());
    let test = args.test.or_else(|| file.usize_field("test")).unwrap_or(128);
    let seed = args.seed.or_else(|| file.u64_field("seed")).unwrap_or(0);

    let kind = parse_pde(&pde)?;
    let meshes = parse_usize_list(&meshes_text, "mesh").map_err(CliError::Config)?;
    let counts = parse_usize_list(&counts_text, "count").map_err(CliError::Config)?;

    let run_config = RunConfig {
        command: "generate".into(),
        pde: Some(pde),
        meshes: Some(meshes.clone()),
        counts: Some(counts.clone()),
        test: Some(test),
        model: None,
        data: None,
        reference: None,
        m_grid: None,
        k: None,
        hidden: None,
        lr: None,
        epochs: None,
        rk4_steps: None,
        fold: None,
        gp_iters: None,
        val_every: None,
        seed,
        out: args.out.display().to_string(),
    };

    let ds = generate_dataset(&PdeSpec::new(kind), &meshes, &counts, test, seed).map_err(cfg)?;
    save_dataset(&ds, &args.out).map_err(rt)?;
    run_config.write_echo(&args.out).map_err(rt)?;
    if ds.meta.cfl_warnings > 0 {
        eprintln!(
            "warning: {} solve(s) exceeded the explicit convection CFL bound",
            ds.meta.cfl_warnings
        );
    }
    println!(
        "wrote {} train + {} test examples (d = {}) to {}",
        ds.train.len(),
        ds.test.len(),
        ds.meta.d,
        args.out.display()
    );
    Ok(())
}

/// nRMSE of a model over examples, grouping the fidelity-ODE work per
/// distinct fidelity.
fn model_nrmse(model: &TrainedModel, examples: &[Example], steps_per_unit: usize) -> Result<f64, CliError> {
    let mut fidelities: Vec<f64> = Vec::new();
    for e in examples {
        if !fidelities.iter().any(|&m| m == e.m) {
            fidelities.push(e.m);
        }
    }
    let mut preds: Vec<Vec<f64>> = vec![Vec::new(); examples.len()];
    for &m in &fidelities {
        let idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].m == m).collect();
        let xs: Vec<Vec<f64>> = idx.iter().map(|&i| examples[i].x.clone()).collect();
        let ps = model.predict_many(&xs, m, steps_per_unit).map_err(rt)?;
        for (i, p) in idx.into_iter().zip(ps) {
            preds[i] = p;
        }
    }
    let truths: Vec<Vec<f64>> = examples.iter().map(|e| e.y.clone()).collect();
    nrmse(&preds, &truths).map_err(rt)
}

struct TrainResolved {
    model_kind: String,
    data_dir: PathBuf,
    k: usize,
    hidden: usize,
    lr: f64,
    epochs: usize,
    rk4_steps: usize,
    fold: usize,
    gp_iters: usize,
    val_every: usize,
    seed: u64,
}

fn resolve_train(args: &TrainArgs) -> Result<(TrainResolved, RunConfig), CliError> {
    let file = FileConfig::load(&args.config).map_err(CliError::Config)?;
    let model_kind = args
        .model
        .clone()
        .or_else(|| file.str_field("model"))
        .ok_or_else(|| CliError::Config("--model is required".into()))?;
    let data_dir = args
        .data
        .clone()
        .or_else(|| file.str_field("data").map(PathBuf::from))
        .ok_or_else(|| CliError::Config("--data is required".into()))?;
    let r = TrainResolved {
        model_kind: model_kind.clone(),
        data_dir: data_dir.clone(),
        k: args.k.or_else(|| file.usize_field("k")).unwrap_or(10),
        hidden: args.hidden.or_else(|| file.usize_field("hidden")).unwrap_or(40),
        lr: args.lr.or_else(|| file.f64_field("lr")).unwrap_or(5e-3),
        epochs: args.epochs.or_else(|| file.usize_field("epochs")).unwrap_or(1000),
        rk4_steps: args.rk4_steps.or_else(|| file.usize_field("rk4_steps")).unwrap_or(10),
        fold: args.fold.or_else(|| file.usize_field("fold")).unwrap_or(0),
        gp_iters: args.gp_iters.or_else(|| file.usize_field("gp_iters")).unwrap_or(200),
        val_every: args.val_every.or_else(|| file.usize_field("val_every")).unwrap_or(0),
        seed: args.seed.or_else(|| file.u64_field("seed")).unwrap_or(0),
    };
    if !(1e-3..=1e-2).contains(&r.lr) {
        return Err(CliError::Config(format!("lr {} outside the accepted range [1e-3, 1e-2]", r.lr)));
    }
    if r.epochs > 5000 {
        return Err(CliError::Config(format!("epochs {} exceeds the maximum of 5000", r.epochs)));
    }
    if r.k == 0 || r.hidden == 0 || r.rk4_steps == 0 {
        return Err(CliError::Config("k, hidden and rk4-steps must be positive".into()));
    }
    let run_config = RunConfig {
        command: "train".into(),
        pde: None,
        meshes: None,
        counts: None,
        test: None,
        model: Some(model_kind),
        data: Some(data_dir.display().to_string()),
        reference: None,
        m_grid: None,
        k: Some(r.k),
        hidden: Some(r.hidden),
        lr: Some(r.lr),
        epochs: Some(r.epochs),
        rk4_steps: Some(r.rk4_steps),
        fold: Some(r.fold),
        gp_iters: Some(r.gp_iters),
        val_every: Some(r.val_every),
        seed: r.seed,
        out: args.out.display().to_string(),
    };
    Ok((r, run_config))
}

/// Shared epilogue: final metrics, checkpoint, report, config echo.
fn finish_train(
    out_dir: &Path,
    model: TrainedModel,
    mut report: TrainReport,
    meta: RunMeta,
    ds: &FidelityDataset,
    steps_per_unit: usize,
) -> Result<(), CliError> {
    let test_nrmse = model_nrmse(&model, &ds.test, steps_per_unit)?;
    report.final_test_nrmse = Some(test_nrmse);
    std::fs::create_dir_all(out_dir).map_err(rt)?;
    let (header, blob) = model.to_checkpoint(meta);
    save_checkpoint(&out_dir.join("model.ckpt"), &header, &blob).map_err(rt)?;
    report.write_csv(&out_dir.join("report.csv")).map_err(rt)?;
    report.write_metrics_json(&out_dir.join("metrics.json")).map_err(rt)?;
    println!("{}: test nRMSE {:.6}", model.kind_name(), test_nrmse);
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let (r, run_config) = resolve_train(&args)?;
    let ds = load_dataset(&r.data_dir).map_err(cfg)?;
    run_config.write_echo(&args.out).map_err(rt)?;
    let config_hash = run_config.hash();
    let streams = RngStreams::new(r.seed);
    let meta = RunMeta {
        dataset_kind: ds.meta.kind,
        fidelity_map: ds.meta.fidelity_map,
        d: ds.meta.d,
        input_dim: ds.meta.input_dim,
        seed: r.seed,
        config_hash: config_hash.clone(),
        steps_per_unit: r.rk4_steps,
    };
    let train_outputs: Vec<Vec<f64>> = ds.train.iter().map(|e| e.y.clone()).collect();
    let mut fit_cfg = FitConfig::new(r.lr, r.epochs, r.seed);
    fit_cfg.config_hash = config_hash;
    fit_cfg.val_every = r.val_every;

    let progress = |report: &TrainReport| {
        if let Some(last) = report.epochs.last() {
            eprintln!("epoch {:>5}  loss {:.6e}  lr {:.2e}", last.epoch, last.loss, last.lr);
        }
    };

    match r.model_kind.as_str() {
        "ifc-ode2" => {
            let mut model = IfcOde2Model::init(
                ds.meta.input_dim,
                ds.meta.d,
                r.k,
                r.hidden,
                &mut streams.stream("init"),
                Some(&train_outputs),
            )
            .map_err(cfg)?;
            let frozen = model.clone();
            let mut objective = Ode2Objective { model: &frozen, data: &ds.train, steps_per_unit: r.rk4_steps };
            let mut validate = if r.val_every > 0 {
                let vm = model.clone();
                let test = ds.test.clone();
                Some(val_fn(move |params: &[f64]| {
                    let mut m = vm.clone();
                    m.set_params(params);
                    model_nrmse(&TrainedModel::IfcOde2(m), &test, r.rk4_steps).ok()
                }))
            } else {
                None
            };
            let (params, report) = fit(&mut objective, model.params(), &fit_cfg, validate.as_deref_mut()).map_err(rt)?;
            progress(&report);
            model.set_params(&params);
            finish_train(&args.out, TrainedModel::IfcOde2(model), report, meta, &ds, r.rk4_steps)
        }
        "sf" => {
            let mut model = SfModel::init(
                ds.meta.input_dim,
                ds.meta.d,
                r.k,
                r.hidden,
                &mut streams.stream("init"),
                Some(&train_outputs),
            )
            .map_err(cfg)?;
            let frozen = model.clone();
            let mut objective = SfObjective { model: &frozen, data: &ds.train };
            let mut validate = if r.val_every > 0 {
                let vm = model.clone();
                let test = ds.test.clone();
                Some(val_fn(move |params: &[f64]| {
                    let mut m = vm.clone();
                    m.set_params(params);
                    model_nrmse(&TrainedModel::Sf(m), &test, 1).ok()
                }))
            } else {
                None
            };
            let (params, report) = fit(&mut objective, model.params(), &fit_cfg, validate.as_deref_mut()).map_err(rt)?;
            progress(&report);
            model.set_params(&params);
            finish_train(&args.out, TrainedModel::Sf(model), report, meta, &ds, r.rk4_steps)
        }
        "ifc-gpode" => {
            let fidelities = ds.train_fidelities();
            let fold = if r.fold == 0 { default_fold(ds.meta.d) } else { fold_shape(ds.meta.d, r.fold) };
            let mut model = GpodeModel::init(
                ds.meta.input_dim,
                ds.meta.d,
                r.k,
                r.hidden,
                &fold,
                fidelities,
                &mut streams.stream("init"),
                Some(&train_outputs),
            )
            .map_err(cfg)?;
            let frozen = model.clone();
            let mut objective = GpodeObjective { model: &frozen, data: &ds.train, steps_per_unit: r.rk4_steps };
            let mut validate = if r.val_every > 0 {
                let vm = model.clone();
                let test = ds.test.clone();
                Some(val_fn(move |params: &[f64]| {
                    let mut m = vm.clone();
                    m.set_params(params);
                    model_nrmse(&TrainedModel::IfcGpode(m), &test, r.rk4_steps).ok()
                }))
            } else {
                None
            };
            let (params, report) = fit(&mut objective, model.params(), &fit_cfg, validate.as_deref_mut()).map_err(rt)?;
            progress(&report);
            model.set_params(&params);
            finish_train(&args.out, TrainedModel::IfcGpode(model), report, meta, &ds, r.rk4_steps)
        }
        "pca-gp" => {
            let start = std::time::Instant::now();
            let inputs: Vec<Vec<f64>> = ds.train.iter().map(|e| e.x.clone()).collect();
            let model = PcaGpModel::fit(&inputs, &train_outputs, r.k, r.gp_iters).map_err(rt)?;
            let report = baseline_report(&fit_cfg, start.elapsed().as_secs_f64());
            finish_train(&args.out, TrainedModel::PcaGp(model), report, meta, &ds, r.rk4_steps)
        }
        "drc" => {
            let start = std::time::Instant::now();
            let groups = fidelity_groups(&ds);
            let model = DrcModel::fit(&groups, r.k, r.gp_iters).map_err(rt)?;
            let report = baseline_report(&fit_cfg, start.elapsed().as_secs_f64());
            finish_train(&args.out, TrainedModel::Drc(model), report, meta, &ds, r.rk4_steps)
        }
        other => Err(CliError::Config(format!(
            "unknown model {other:?} (expected ifc-ode2 | ifc-gpode | sf | pca-gp | drc)"
        ))),
    }
}

fn baseline_report(cfg: &FitConfig, wall_secs: f64) -> TrainReport {
    TrainReport {
        epochs: Vec::new(),
        final_loss: None,
        final_test_nrmse: None,
        wall_secs,
        seed: cfg.seed,
        config_hash: cfg.config_hash.clone(),
        status: ifc_core::trainer::FitStatus::Completed,
    }
}

/// Per-fidelity (inputs, outputs) groups, lowest fidelity first.
fn fidelity_groups(ds: &FidelityDataset) -> Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let fidelities = ds.train_fidelities();
    fidelities
        .iter()
        .map(|&m| {
            let xs: Vec<Vec<f64>> = ds.train.iter().filter(|e| e.m == m).map(|e| e.x.clone()).collect();
            let ys: Vec<Vec<f64>> = ds.train.iter().filter(|e| e.m == m).map(|e| e.y.clone()).collect();
            (xs, ys)
        })
        .collect()
}

fn val_fn(f: impl FnMut(&[f64]) -> Option<f64> + 'static) -> Box<dyn FnMut(&[f64]) -> Option<f64>> {
    Box::new(f)
}

fn resolve_checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("model.ckpt")
    } else {
        p.to_path_buf()
    }
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let file = FileConfig::load(&args.config).map_err(CliError::Config)?;
    let model_path = args
        .model
        .or_else(|| file.str_field("model").map(PathBuf::from))
        .ok_or_else(|| CliError::Config("--model is required".into()))?;
    let data_dir = args
        .data
        .or_else(|| file.str_field("data").map(PathBuf::from))
        .ok_or_else(|| CliError::Config("--data is required".into()))?;

    let (header, blob) = load_checkpoint(&resolve_checkpoint_path(&model_path)).map_err(cfg)?;
    let model = TrainedModel::from_checkpoint(&header, &blob).map_err(cfg)?;
    let ds = load_dataset(&data_dir).map_err(cfg)?;
    if ds.meta.d != header.meta.d {
        return Err(CliError::Config(format!(
            "model expects d = {}, dataset has d = {}",
            header.meta.d, ds.meta.d
        )));
    }

    let run_config = RunConfig {
        command: "eval".into(),
        pde: None,
        meshes: None,
        counts: None,
        test: None,
        model: Some(model_path.display().to_string()),
        data: Some(data_dir.display().to_string()),
        reference: None,
        m_grid: None,
        k: None,
        hidden: None,
        lr: None,
        epochs: None,
        rk4_steps: Some(header.meta.steps_per_unit),
        fold: None,
        gp_iters: None,
        val_every: None,
        seed: header.meta.seed,
        out: args.out.display().to_string(),
    };
    run_config.write_echo(&args.out).map_err(rt)?;

    let value = model_nrmse(&model, &ds.test, header.meta.steps_per_unit)?;
    #[derive(serde::Serialize)]
    struct EvalMetrics<'a> {
        model: &'a str,
        n_test: usize,
        nrmse: f64,
        config_hash: String,
    }
    let metrics = EvalMetrics {
        model: model.kind_name(),
        n_test: ds.test.len(),
        nrmse: value,
        config_hash: run_config.hash(),
    };
    std::fs::write(
        args.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics).unwrap(),
    )
    .map_err(rt)?;
    println!("{}: test nRMSE {:.6}", model.kind_name(), value);
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let file = FileConfig::load(&args.config).map_err(CliError::Config)?;
    let model_path = args
        .model
        .or_else(|| file.str_field("model").map(PathBuf::from))
        .ok_or_else(|| CliError::Config("--model is required".into()))?;
    let reference = args
        .reference
        .or_else(|| file.str_field("reference").map(PathBuf::from))
        .ok_or_else(|| CliError::Config("--reference is required".into()))?;
    let m_text = args
        .m
        .or_else(|| file.str_field("m"))
        .ok_or_else(|| CliError::Config("--m is required (start:stop:step or comma list)".into()))?;
    let grid = parse_m_grid(&m_text).map_err(CliError::Config)?;
    if grid.iter().any(|&m| m < 0.0) {
        return Err(CliError::Config("fidelities must be nonnegative".into()));
    }

    let (header, blob) = load_checkpoint(&resolve_checkpoint_path(&model_path)).map_err(cfg)?;
    let model = TrainedModel::from_checkpoint(&header, &blob).map_err(cfg)?;
    let refds = load_dataset(&reference).map_err(cfg)?;

    let s_model = (header.meta.d as f64).sqrt().round() as usize;
    if s_model * s_model != header.meta.d {
        return Err(CliError::Config(format!("model output dim {} is not a square field", header.meta.d)));
    }
    let s_ref = (refds.meta.d as f64).sqrt().round() as usize;
    if s_ref * s_ref != refds.meta.d {
        return Err(CliError::Config(format!("reference output dim {} is not a square field", refds.meta.d)));
    }
    if refds.test.is_empty() {
        return Err(CliError::Config("reference dataset has no test examples".into()));
    }

    let run_config = RunConfig {
        command: "sweep-fidelity".into(),
        pde: None,
        meshes: None,
        counts: None,
        test: None,
        model: Some(model_path.display().to_string()),
        data: None,
        reference: Some(reference.display().to_string()),
        m_grid: Some(m_text.clone()),
        k: None,
        hidden: None,
        lr: None,
        epochs: None,
        rk4_steps: Some(header.meta.steps_per_unit),
        fold: None,
        gp_iters: None,
        val_every: None,
        seed: header.meta.seed,
        out: args.out.display().to_string(),
    };
    run_config.write_echo(&args.out).map_err(rt)?;

    let xs: Vec<Vec<f64>> = refds.test.iter().map(|e| e.x.clone()).collect();
    let truths: Vec<Vec<f64>> = refds.test.iter().map(|e| e.y.clone()).collect();
    let mut csv = String::from("m,mesh,nrmse\n");
    for &m in &grid {
        let preds = model.predict_many(&xs, m, header.meta.steps_per_unit).map_err(rt)?;
        let upsampled: Vec<Vec<f64>> = preds
            .into_iter()
            .map(|p| resample_field(&p, s_model, s_ref))
            .collect();
        let value = nrmse(&upsampled, &truths).map_err(rt)?;
        let mesh = match header.meta.fidelity_map {
            Some(map) => map.mesh_of_fidelity(m).round() as i64,
            None => s_model as i64,
        };
        csv.push_str(&format!("{m},{mesh},{value}\n"));
        eprintln!("m = {m:.4}  mesh ~ {mesh}  nRMSE {value:.6}");
    }
    std::fs::create_dir_all(&args.out).map_err(rt)?;
    let mut f = std::fs::File::create(args.out.join("sweep.csv")).map_err(rt)?;
    f.write_all(csv.as_bytes()).map_err(rt)?;
    println!("wrote {} sweep rows to {}", grid.len(), args.out.join("sweep.csv").display());
    Ok(())
}

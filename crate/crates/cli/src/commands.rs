use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use molgap::cache::CacheHeader;
use molgap::check::{model_grad_check, probe_setup};
use molgap::dataset::load_dataset;
use molgap::ensemble::{run_inference, write_predictions};
use molgap::featurize::featurize_all;
use molgap::profile::{self, model_config, train_config};
use molgap::synth::{synthetic_molecules, SynthConfig};
use molgap::train::{evaluate_mae, fit, kfold_split, FoldSelection};
use molgap::{
    read_cache, write_cache, Checkpoint, EnsembleSpec, FeaturizedGraph, GradCheckConfig, Model, ModelConfig,
    ModelKind, Profile, RbfConfig, Regressor, Schema, SpatialMode,
};
use serde::Serialize;

use crate::args::*;
use crate::error::CliError;
use crate::manifest::{artifacts, manifest_path, write_atomic, RunManifest, Status};

/// Manifest bookkeeping around one command.
struct Run {
    manifest: RunManifest,
    path: PathBuf,
}

impl Run {
    fn begin(out: &Path, command: Command, seed: Option<u64>, inputs: &[PathBuf]) -> Result<Self, CliError> {
        let manifest = RunManifest::start(command, seed, artifacts(inputs)?);
        let path = manifest_path(out);
        manifest.save(&path)?;
        Ok(Self { manifest, path })
    }

    fn finish(mut self, result: Result<Vec<PathBuf>, CliError>) -> Result<Vec<PathBuf>, CliError> {
        self.manifest.finished_unix_ms = Some(crate::manifest::now_ms());
        match &result {
            Ok(outputs) => {
                self.manifest.outputs = artifacts(outputs)?;
                self.manifest.status = Status::Ok;
            }
            Err(e) => {
                self.manifest.status = Status::Failed;
                self.manifest.error = Some(e.to_string());
            }
        }
        self.manifest.save(&self.path)?;
        result
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json_atomic(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable report");
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn ensure_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir),
        _ => Ok(()),
    }
}

pub fn synth(args: SynthArgs) -> Result<Vec<PathBuf>, CliError> {
    if args.min_atoms == 0 || args.min_atoms > args.max_atoms {
        return Err(CliError::Usage("need 1 <= --min-atoms <= --max-atoms".into()));
    }
    let run = Run::begin(&args.out, Command::Synth(args.clone()), Some(args.seed), &[])?;
    let body = || {
        let (schema, graphs) = synthetic_molecules(&SynthConfig {
            count: args.count,
            min_atoms: args.min_atoms,
            max_atoms: args.max_atoms,
            ring_prob: args.ring_prob,
            seed: args.seed,
        });
        let mut buf = Vec::new();
        molgap::write_dataset(&mut buf, &schema, &graphs)?;
        write_atomic(&args.out, &buf)?;
        println!("wrote {} molecules to {}", graphs.len(), args.out.display());
        Ok(vec![args.out.clone()])
    };
    run.finish(body())
}

pub fn validate(args: ValidateArgs) -> Result<(), CliError> {
    let (schema, graphs) = load_dataset(&args.data)?;
    let atoms: usize = graphs.iter().map(|g| g.n_atoms()).sum();
    let labeled = graphs.iter().filter(|g| g.target.is_some()).count();
    println!(
        "{}: {} molecules ({} labeled), {} atoms, {} atom / {} bond columns",
        args.data.display(),
        graphs.len(),
        labeled,
        atoms,
        schema.n_atom_fields(),
        schema.n_bond_fields()
    );
    Ok(())
}

fn profile_rbf(p: Profile) -> RbfConfig {
    match p {
        Profile::Paper => RbfConfig::default(),
        Profile::Mini => profile::mini_rbf(),
    }
}

pub fn featurize(args: FeaturizeArgs) -> Result<Vec<PathBuf>, CliError> {
    let base = profile_rbf(args.profile);
    let rbf = RbfConfig::over_range(
        args.rbf_kernels.unwrap_or(base.n_kernels),
        args.rbf_min.unwrap_or(base.center_min),
        args.rbf_max.unwrap_or(base.center_max),
    );
    rbf.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let workers = args.workers.max(1);
    let run = Run::begin(&args.out, Command::Featurize(args.clone()), None, std::slice::from_ref(&args.data))?;
    let body = || {
        let (schema, graphs) = load_dataset(&args.data)?;
        let mode: SpatialMode = args.spatial_mode.into();
        let fgs = featurize_all(&graphs, &schema, &rbf, mode, workers)?;
        let header = CacheHeader {
            spatial_mode: mode,
            rbf,
            schema,
        };
        let mut buf = Vec::new();
        write_cache(&mut buf, &header, &fgs)?;
        write_atomic(&args.out, &buf)?;
        println!(
            "featurized {} molecules ({} kernels) into {}",
            fgs.len(),
            rbf.n_kernels,
            args.out.display()
        );
        Ok(vec![args.out.clone()])
    };
    run.finish(body())
}

fn config_schema(cfg: &ModelConfig) -> &Schema {
    match cfg {
        ModelConfig::Graphormer(c) => &c.schema,
        ModelConfig::Expc(c) => &c.schema,
    }
}

/// Spatial mode and RBF the model's inputs must be featurized with.
fn feature_needs(cfg: &ModelConfig) -> (SpatialMode, RbfConfig) {
    match cfg {
        ModelConfig::Graphormer(c) => (c.spatial_mode, c.rbf),
        // ExpC never reads distances; skip the pair expansion
        ModelConfig::Expc(_) => (SpatialMode::Hop, RbfConfig::with_kernels(1)),
    }
}

fn schema_fits(data: &Schema, model: &Schema) -> bool {
    data.atom_vocab.len() == model.atom_vocab.len()
        && data.bond_vocab.len() == model.bond_vocab.len()
        && data.atom_vocab.iter().zip(&model.atom_vocab).all(|(d, m)| d <= m)
        && data.bond_vocab.iter().zip(&model.bond_vocab).all(|(d, m)| d <= m)
}

/// Inputs for `cfg`, read from a cache (checked against the model) or
/// featurized from a dataset.
fn model_inputs(
    cfg: &ModelConfig,
    data: Option<&Path>,
    cache: Option<&Path>,
    workers: usize,
) -> Result<Vec<FeaturizedGraph>, CliError> {
    let (mode, rbf) = feature_needs(cfg);
    let schema = config_schema(cfg);
    if let Some(path) = cache {
        let (header, graphs) = read_cache(&mut BufReader::new(File::open(path)?))?;
        if let ModelConfig::Graphormer(_) = cfg {
            if header.spatial_mode != mode {
                return Err(CliError::Data(format!(
                    "cache {} was featurized in {:?} mode, the model needs {:?}",
                    path.display(),
                    header.spatial_mode,
                    mode
                )));
            }
            if mode == SpatialMode::EuclideanRbf && header.rbf != rbf {
                return Err(CliError::Data(format!(
                    "cache {} RBF {:?} differs from the model RBF {:?}",
                    path.display(),
                    header.rbf,
                    rbf
                )));
            }
        }
        if !schema_fits(&header.schema, schema) {
            return Err(CliError::Data(format!(
                "cache {} schema does not fit the model's embedding tables",
                path.display()
            )));
        }
        return Ok(graphs);
    }
    let path = data.ok_or_else(|| CliError::Usage("one of --data or --cache is required".into()))?;
    let (data_schema, graphs) = load_dataset(path)?;
    if !schema_fits(&data_schema, schema) {
        return Err(CliError::Data(format!(
            "dataset {} schema does not fit the model's embedding tables",
            path.display()
        )));
    }
    Ok(featurize_all(&graphs, schema, &rbf, mode, workers)?)
}

fn dataset_schema(data: Option<&Path>, cache: Option<&Path>) -> Result<Schema, CliError> {
    if let Some(p) = cache {
        return Ok(read_cache(&mut BufReader::new(File::open(p)?))?.0.schema);
    }
    let p = data.ok_or_else(|| CliError::Usage("one of --data or --cache is required".into()))?;
    Ok(molgap::dataset::open_dataset(p)?.schema().clone())
}

fn fold_label(sel: FoldSelection) -> String {
    match sel {
        FoldSelection::Fold(k) => format!("fold{k}"),
        FoldSelection::All => "all".into(),
    }
}

fn resolve_train(args: &TrainArgs) -> Result<RunConfig, CliError> {
    if let Some(r) = &args.resolved {
        return Ok(r.clone());
    }
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        return serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())));
    }
    let schema = match args.profile {
        Profile::Paper => profile::paper_schema(),
        Profile::Mini => dataset_schema(args.data.as_deref(), args.cache.as_deref())?,
    };
    Ok(RunConfig {
        model: model_config(args.model, args.profile, schema),
        train: train_config(args.model, args.profile),
    })
}

#[derive(Serialize)]
struct TrainSummary {
    steps: u64,
    final_train_mae: Option<f64>,
    best_val_mae: Option<f64>,
}

pub fn train(mut args: TrainArgs) -> Result<Vec<PathBuf>, CliError> {
    if args.profile == Profile::Paper && !args.i_have_the_compute && args.resolved.is_none() {
        return Err(CliError::Usage(
            "the paper profile trains for 1.5M steps at batch 1024 (or 100 epochs over 3.8M molecules); \
             pass --i-have-the-compute to start it anyway"
                .into(),
        ));
    }
    let cfg = resolve_train(&args)?;
    let kind = match cfg.model {
        ModelConfig::Graphormer(_) => ModelKind::Graphormer,
        ModelConfig::Expc(_) => ModelKind::Expc,
    };
    if kind != args.model {
        return Err(CliError::Usage(format!("--model {} but the config describes {kind}", args.model)));
    }
    let model = Model::from_config(&cfg.model)?;
    cfg.train.validate()?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}-seed{}.ckpt", args.model, fold_label(args.fold), args.seed)));
    args.out = Some(out.clone());
    args.resolved = Some(cfg.clone());
    let inputs: Vec<PathBuf> = args.data.iter().chain(args.cache.iter()).cloned().collect();
    ensure_parent(&out)?;
    let run = Run::begin(&out, Command::Train(args.clone()), Some(args.seed), &inputs)?;
    let body = || {
        let data = model_inputs(&cfg.model, args.data.as_deref(), args.cache.as_deref(), args.workers)?;
        let ids: Vec<String> = data.iter().map(|g| g.id.clone()).collect();
        let split = match args.fold {
            FoldSelection::All => molgap::train::Split::all(data.len()),
            sel => kfold_split(&ids, args.folds, args.split_seed)?.split(sel)?,
        };
        let log_path = suffixed(&out, ".log.jsonl");
        let mut log = BufWriter::new(File::create(&log_path)?);
        let mut log_err = None;
        let mut on_record = |r: &molgap::train::MetricRecord| {
            eprintln!(
                "step {:>8} epoch {:>4} lr {:.3e} train_mae {:.5}{}",
                r.step,
                r.epoch,
                r.lr,
                r.train_mae,
                r.val_mae.map(|v| format!(" val_mae {v:.5}")).unwrap_or_default()
            );
            let line = serde_json::to_string(r).expect("serializable record");
            if let Err(e) = writeln!(log, "{line}") {
                log_err.get_or_insert(e);
            }
        };
        let fitted = fit(&model, &data, &split, &cfg.train, args.seed, args.workers, &mut on_record)?;
        if let Some(e) = log_err {
            return Err(e.into());
        }
        log.flush()?;
        drop(log);
        fitted.checkpoint.save(&out)?;
        let summary = TrainSummary {
            steps: fitted.steps,
            final_train_mae: fitted.log.last().map(|r| r.train_mae),
            best_val_mae: fitted.best_val_mae,
        };
        println!("{}", serde_json::to_string(&summary).expect("serializable summary"));
        Ok(vec![out.clone(), molgap::model::manifest_path(&out), log_path])
    };
    run.finish(body())
}

#[derive(Serialize)]
struct EvalReport {
    molecules: usize,
    mae: f64,
}

pub fn eval(mut args: EvalArgs) -> Result<Vec<PathBuf>, CliError> {
    let out = args.out.clone().unwrap_or_else(|| suffixed(&args.checkpoint, ".eval.json"));
    args.out = Some(out.clone());
    let mut inputs = vec![args.checkpoint.clone()];
    inputs.extend(args.data.iter().chain(args.cache.iter()).cloned());
    let run = Run::begin(&out, Command::Eval(args.clone()), None, &inputs)?;
    let body = || {
        let ckpt = Checkpoint::load(&args.checkpoint)?;
        ckpt.model()?;
        let data = model_inputs(&ckpt.config, args.data.as_deref(), args.cache.as_deref(), args.workers)?;
        let data = match args.fold {
            None => data,
            Some(k) => {
                let ids: Vec<String> = data.iter().map(|g| g.id.clone()).collect();
                let split = kfold_split(&ids, args.folds, args.split_seed)?.split(FoldSelection::Fold(k))?;
                split.val.iter().map(|&i| data[i].clone()).collect()
            }
        };
        let mae = evaluate_mae(&ckpt, &data, args.workers)?;
        println!("mae {mae:.6} over {} molecules", data.len());
        write_json_atomic(&out, &EvalReport { molecules: data.len(), mae })?;
        Ok(vec![out.clone()])
    };
    run.finish(body())
}

#[derive(Serialize)]
struct GradcheckReport {
    max_rel_error: f64,
    worst_param: String,
    worst_index: usize,
    worst_analytic: f64,
    worst_numeric: f64,
    coords_checked: usize,
    tolerance: f64,
    passed: bool,
}

fn profile_schema(p: Profile) -> Schema {
    match p {
        Profile::Paper => profile::paper_schema(),
        Profile::Mini => Schema::ogb(),
    }
}

pub fn gradcheck(mut args: GradcheckArgs) -> Result<Vec<PathBuf>, CliError> {
    if args.profile == Profile::Paper && !args.i_have_the_compute {
        return Err(CliError::Usage(
            "a paper-profile gradient check runs thousands of 47M-parameter forward passes; \
             pass --i-have-the-compute to start it anyway"
                .into(),
        ));
    }
    if args.graphs == 0 || args.samples == 0 || args.eps <= 0.0 {
        return Err(CliError::Usage("--graphs, --samples and --eps must be positive".into()));
    }
    let out = args.out.clone().unwrap_or_else(|| {
        PathBuf::from(format!("runs/gradcheck-{}-{}-seed{}.json", args.model, args.profile, args.seed))
    });
    args.out = Some(out.clone());
    let run = Run::begin(&out, Command::Gradcheck(args.clone()), Some(args.seed), &[])?;
    let body = || {
        let cfg = model_config(args.model, args.profile, profile_schema(args.profile));
        let (model, params, graphs) = probe_setup(&cfg, args.graphs, args.seed)?;
        let r = model_grad_check(
            &model,
            &params,
            &graphs,
            GradCheckConfig {
                eps: args.eps,
                samples_per_tensor: args.samples,
                seed: args.seed,
            },
        )
        .map_err(|e| CliError::Numerical(e.to_string()))?;
        let passed = r.max_rel_error < args.tolerance;
        println!(
            "max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}) over {} coordinates: {}",
            r.max_rel_error,
            r.worst_param,
            r.worst_index,
            r.worst_analytic,
            r.worst_numeric,
            r.coords_checked,
            if passed { "ok" } else { "FAILED" }
        );
        write_json_atomic(
            &out,
            &GradcheckReport {
                max_rel_error: r.max_rel_error,
                worst_param: r.worst_param.clone(),
                worst_index: r.worst_index,
                worst_analytic: r.worst_analytic,
                worst_numeric: r.worst_numeric,
                coords_checked: r.coords_checked,
                tolerance: args.tolerance,
                passed,
            },
        )?;
        if passed {
            Ok(vec![out.clone()])
        } else {
            Err(CliError::Numerical(format!(
                "max relative error {:.3e} exceeds {:.1e}",
                r.max_rel_error, args.tolerance
            )))
        }
    };
    run.finish(body())
}

pub fn ensemble(args: EnsembleArgs) -> Result<Vec<PathBuf>, CliError> {
    let spec = EnsembleSpec::load(&args.spec)?;
    let mut inputs = vec![args.spec.clone(), args.data.clone()];
    let mut seen = std::collections::HashSet::new();
    inputs.extend(spec.entries.iter().map(|e| e.checkpoint.clone()).filter(|p| seen.insert(p.clone())));
    let run = Run::begin(&args.out, Command::Ensemble(args.clone()), None, &inputs)?;
    let body = || {
        let (_, graphs) = load_dataset(&args.data)?;
        let preds = run_inference(&spec, &graphs, args.workers)?;
        let mut buf = Vec::new();
        write_predictions(&mut buf, &preds)?;
        write_atomic(&args.out, &buf)?;
        println!(
            "{} predictions from {} entries written to {}",
            preds.len(),
            spec.entries.len(),
            args.out.display()
        );
        Ok(vec![args.out.clone()])
    };
    run.finish(body())
}

pub fn count_params(args: CountParamsArgs) -> Result<(), CliError> {
    let cfg = model_config(args.model, args.profile, profile_schema(args.profile));
    let model = Model::from_config(&cfg)?;
    let total: usize = model.param_specs().iter().map(|s| s.size()).sum();
    println!("{total}");
    Ok(())
}

/// Points every output of `cmd` at a `.replay` sibling and pins one worker.
fn redirect(cmd: &mut Command) -> Result<(), CliError> {
    let relocate = |p: &mut PathBuf| *p = suffixed(p, ".replay");
    match cmd {
        Command::Synth(a) => relocate(&mut a.out),
        Command::Featurize(a) => {
            relocate(&mut a.out);
            a.workers = 1;
        }
        Command::Train(a) => {
            a.out.as_mut().map(relocate);
            a.workers = 1;
        }
        Command::Eval(a) => {
            a.out.as_mut().map(relocate);
            a.workers = 1;
        }
        Command::Gradcheck(a) => {
            a.out.as_mut().map(relocate);
        }
        Command::Ensemble(a) => {
            relocate(&mut a.out);
            a.workers = 1;
        }
        Command::Validate(_) | Command::CountParams(_) | Command::Replay(_) => {
            return Err(CliError::Data("manifest records a command without outputs".into()))
        }
    }
    Ok(())
}

pub fn replay(args: ReplayArgs) -> Result<(), CliError> {
    let manifest = RunManifest::load(&args.manifest)?;
    if manifest.status != Status::Ok {
        return Err(CliError::Data(format!(
            "{} records a run that did not complete",
            args.manifest.display()
        )));
    }
    let mut cmd = manifest.command.clone();
    redirect(&mut cmd)?;
    let outputs = crate::execute(cmd)?;
    if outputs.len() != manifest.outputs.len() {
        return Err(CliError::Numerical(format!(
            "replay produced {} outputs, the manifest lists {}",
            outputs.len(),
            manifest.outputs.len()
        )));
    }
    let mut mismatches = 0;
    for (new, old) in outputs.iter().zip(&manifest.outputs) {
        let hash = crate::manifest::sha256_file(new)?;
        let same = hash == old.sha256;
        mismatches += usize::from(!same);
        println!(
            "{} {} vs {}",
            if same { "identical" } else { "DIFFERS" },
            new.display(),
            old.path.display()
        );
    }
    if mismatches > 0 {
        return Err(CliError::Numerical(format!("{mismatches} replayed outputs differ")));
    }
    Ok(())
}

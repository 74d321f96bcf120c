use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use neuromed::capsnet::{default_deltas, perturb_and_decode};
use neuromed::data::{gen_synthetic, kfold_by_patient, load_dataset, save_dataset, split_stratified_by_patient, subsample_fraction, LabeledImageSet, SynthConfig};
use neuromed::metrics::MetricsReport;
use neuromed::model::train::accuracy as ann_accuracy;
use neuromed::model::{load_model, save_model, train_with_validation, zoo, LRSchedule, LayerSpec, LossKind, ModelGraph, Optimizer, TrainConfig};
use neuromed::pca::pca_fit;
use neuromed::report::{approach_table, class_table, kfold_table, ApproachRow, Table};
use neuromed::snn::{self, load_snn, save_snn, sweep_csv, timestep_sweep, ConvertOptions, Encoding, OutputShift, SimConfig, SpikingNetwork};
use neuromed::Tensor;
use rayon::prelude::*;
use serde_json::json;

use super::manifest::Run;
use super::parse;
use super::settings::Settings;
use super::{BenchmarkArgs, CliError, ConvertArgs, ExplainArgs, GenDataArgs, SimulateArgs, SplitArgs, TrainArgs};

fn sibling(primary: &Path, suffix: &str) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))
}

fn read_dataset(path: &Path) -> Result<LabeledImageSet, CliError> {
    load_dataset(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

fn read_model(path: &Path) -> Result<ModelGraph, CliError> {
    load_model(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

fn read_snn(path: &Path) -> Result<SpikingNetwork, CliError> {
    load_snn(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

fn encoder(text: &str) -> Result<Encoding, CliError> {
    Encoding::parse(text).map_err(|e| CliError::Usage(e.to_string()))
}

fn metrics_csv(report: &MetricsReport, names: &[String]) -> String {
    let mut out = format!("metric,value\naccuracy,{:.6}\nmcc,{:.6}\nf1,{:.6}\n\n", report.accuracy, report.mcc, report.f1);
    out.push_str(&class_table(report, names).to_csv());
    out.push('\n');
    out.push_str(&report.confusion.to_csv(names));
    out
}

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let d = SynthConfig::default();
    let priors_text = s.get("priors", a.priors, "0.23,0.47,0.30".to_string())?;
    let cfg = SynthConfig {
        n: s.get("n", a.n, d.n)?,
        patients: s.get("patients", a.patients, d.patients)?,
        priors: parse::list(&priors_text, "prior")?,
        size: s.get("size", a.size, d.size)?,
        noise: s.get("noise", a.noise, d.noise)?,
    };
    let seed = s.get("seed", a.common.seed, 0)?;
    let out = s.path("out", a.out)?;
    s.finish()?;
    let mut run = Run::start("gen-data");
    let ds = gen_synthetic(&cfg, seed)?;
    save_dataset(&ds, &out)?;
    run.output(&out);
    run.extra = json!({ "class_counts": ds.class_counts(), "patients": ds.patients().len() });
    run.finish(&s.resolved)?;
    println!("wrote {} images ({} patients, class counts {:?}) to {}", ds.len(), ds.patients().len(), ds.class_counts(), out.display());
    Ok(())
}

pub fn split(a: SplitArgs) -> Result<(), CliError> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let data = s.path("data", a.data)?;
    let fraction = s.get("test-fraction", a.test_fraction, 0.3)?;
    let seed = s.get("seed", a.common.seed, 0)?;
    let train_out = s.path("train-out", a.train_out)?;
    let test_out = s.path("test-out", a.test_out)?;
    s.finish()?;
    let mut run = Run::start("split");
    let ds = read_dataset(&data)?;
    run.input(&data);
    let (train, test, report) = split_stratified_by_patient(&ds, fraction, seed)?;
    save_dataset(&train, &train_out)?;
    save_dataset(&test, &test_out)?;
    run.output(&train_out);
    run.output(&test_out);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    run.extra = json!({
        "test_fraction": report.test_fraction,
        "train_patients": report.train_patients,
        "test_patients": report.test_patients,
        "warnings": report.warnings,
    });
    run.finish(&s.resolved)?;
    println!(
        "train {} images / {} patients, test {} images / {} patients (test fraction {:.4})",
        train.len(),
        report.train_patients,
        test.len(),
        report.test_patients,
        report.test_fraction
    );
    Ok(())
}

struct ArchSpec {
    arch: String,
    hidden: Vec<usize>,
    dropout: Option<f32>,
    pca: Option<usize>,
    blocks: usize,
    filters: usize,
}

impl ArchSpec {
    /// Fresh model for `train`, plus layers that must stay frozen.
    fn build(&self, train: &LabeledImageSet, seed: u64) -> Result<(ModelGraph, BTreeSet<usize>), CliError> {
        let input = train.image_shape();
        let k = train.class_count();
        let mut frozen = BTreeSet::new();
        let model = match self.arch.as_str() {
            "capsnet" => {
                let mut cfg = zoo::CapsNetConfig::default();
                if let Some(d) = self.dropout {
                    cfg.dropout = d;
                }
                zoo::capsnet(input, k, &cfg, seed)?
            }
            "cnn" => zoo::toy_cnn(input, k, seed)?,
            "resnet" => zoo::residual(input, k, self.blocks, self.filters, seed)?,
            "dense" => {
                let pca = match self.pca {
                    Some(c) => {
                        let flat = train.images().reshape(vec![train.len(), train.image_len()])?;
                        frozen.insert(1);
                        Some(pca_fit(&flat, c)?)
                    }
                    None => None,
                };
                zoo::dense_mlp(input, &self.hidden, k, self.dropout.unwrap_or(0.25), pca.as_ref(), seed)?
            }
            other => return Err(CliError::Usage(format!("unknown --arch {other:?}; expected capsnet, cnn, dense or resnet"))),
        };
        Ok((model, frozen))
    }
}

fn loss_for(model: &ModelGraph) -> LossKind {
    if model.layers().iter().any(|l| matches!(l, LayerSpec::ClassCaps { .. })) {
        LossKind::CapsuleMargin
    } else {
        LossKind::CrossEntropy
    }
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let arch = s.opt::<String>("arch", a.arch)?;
    let init = s.opt_path("init", a.init)?;
    if arch.is_none() && init.is_none() {
        return Err(CliError::Usage("--arch is required unless --init is given".into()));
    }
    let data = s.path("data", a.data)?;
    let val = s.opt_path("val", a.val)?;
    let out = s.path("out", a.out)?;
    let history = s.opt_path("history", a.history)?.unwrap_or_else(|| sibling(&out, ".history.csv"));
    let d = TrainConfig::default();
    let epochs = s.get("epochs", a.epochs, d.epochs)?;
    let batch_size = s.get("batch-size", a.batch_size, d.batch_size)?;
    let lr = s.get("lr", a.lr, 1e-3f32)?;
    let schedule = match s.opt::<String>("lr-policy", a.lr_policy)? {
        Some(p) => LRSchedule::parse(&p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => LRSchedule::Constant { lr },
    };
    let optimizer = match s.get("optimizer", a.optimizer, "adam".to_string())?.as_str() {
        "adam" => Optimizer::default(),
        "sgd" => Optimizer::Sgd { momentum: s.get("momentum", a.momentum, 0.9f32)? },
        other => return Err(CliError::Usage(format!("unknown optimizer {other:?}"))),
    };
    let freeze = match s.opt::<String>("freeze", a.freeze)? {
        Some(t) => parse::index_set(&t)?,
        None => BTreeSet::new(),
    };
    let lr_groups = match s.opt::<String>("lr-groups", a.lr_groups)? {
        Some(t) => parse::lr_groups(&t)?,
        None => Vec::new(),
    };
    let spec = ArchSpec {
        arch: arch.clone().unwrap_or_default(),
        hidden: parse::list(&s.get("hidden", a.hidden, "128".to_string())?, "hidden width")?,
        dropout: s.opt("dropout", a.dropout)?,
        pca: s.opt("pca", a.pca)?,
        blocks: s.get("blocks", a.blocks, 2)?,
        filters: s.get("filters", a.filters, 8)?,
    };
    let reconstruction_weight = s.get("reconstruction-weight", a.reconstruction_weight, d.reconstruction_weight)?;
    let fraction = s.get("fraction", a.fraction, 1.0)?;
    let kfold = s.opt("kfold", a.kfold)?;
    let seed = s.get("seed", a.common.seed, 0)?;
    let verbose = s.flag("verbose", a.verbose)?;
    s.finish()?;

    let mut run = Run::start("train");
    let full = read_dataset(&data)?;
    run.input(&data);
    let train_set = subsample_fraction(&full, fraction, seed)?;
    let base = TrainConfig {
        optimizer,
        schedule,
        batch_size,
        epochs,
        freeze: freeze.clone(),
        lr_groups,
        loss: LossKind::CrossEntropy,
        reconstruction_weight,
        seed,
        verbose,
    };
    let initial = |ds: &LabeledImageSet| -> Result<(ModelGraph, TrainConfig), CliError> {
        let (model, frozen) = match &init {
            Some(p) => (read_model(p)?, BTreeSet::new()),
            None => spec.build(ds, seed)?,
        };
        let mut cfg = base.clone();
        cfg.loss = loss_for(&model);
        cfg.freeze.extend(frozen);
        Ok((model, cfg))
    };

    if let Some(k) = kfold {
        let folds = kfold_by_patient(&train_set, k, seed)?;
        let mut reports = Vec::with_capacity(k);
        for (i, fold) in folds.iter().enumerate() {
            let (tr, va) = fold.sets(&train_set);
            let (model, cfg) = initial(&tr)?;
            let (trained, _) = train_with_validation(&model, &tr, None, &cfg)?;
            let preds = trained.predict(va.images())?;
            let r = MetricsReport::new(&preds, va.labels(), va.class_count())?;
            eprintln!("fold {}: accuracy {:.4} mcc {:.4} f1 {:.4}", i + 1, r.accuracy, r.mcc, r.f1);
            reports.push(r);
        }
        let table = kfold_table(&reports);
        write(&out, &table.to_csv())?;
        let md = sibling(&out, ".md");
        write(&md, &table.to_markdown())?;
        run.output(&out);
        run.output(&md);
        run.finish(&s.resolved)?;
        print!("{}", table.to_markdown());
        return Ok(());
    }

    let validation = val.as_deref().map(read_dataset).transpose()?;
    if let Some(v) = &val {
        run.input(v);
    }
    let (model, cfg) = initial(&train_set)?;
    if let Some(p) = &init {
        run.input(p);
    }
    let (trained, hist) = train_with_validation(&model, &train_set, validation.as_ref(), &cfg)?;
    save_model(&trained, &out)?;
    write(&history, &hist.to_csv())?;
    run.output(&out);
    run.output(&history);
    let last = hist.last().cloned();
    run.extra = json!({
        "arch": arch,
        "parameters": trained.param_count(),
        "final_loss": last.as_ref().map(|r| r.loss),
        "final_train_accuracy": last.as_ref().map(|r| r.train_acc),
        "final_val_accuracy": last.as_ref().and_then(|r| r.val_acc),
    });
    run.finish(&s.resolved)?;
    if let Some(r) = last {
        println!(
            "trained {} epochs: loss {:.4}, train accuracy {:.4}{}",
            hist.epochs.len(),
            r.loss,
            r.train_acc,
            r.val_acc.map(|v| format!(", validation accuracy {v:.4}")).unwrap_or_default()
        );
    }
    Ok(())
}

pub fn convert(a: ConvertArgs) -> Result<(), CliError> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let model_path = s.path("model", a.model)?;
    let calib_path = s.path("calib", a.calib)?;
    let percentile = s.get("percentile", a.percentile, snn::DEFAULT_PERCENTILE)?;
    let out = s.path("out", a.out)?;
    let report_path = s.opt_path("report", a.report)?.unwrap_or_else(|| sibling(&out, ".report.csv"));
    let eval = s.get("eval-timesteps", a.eval_timesteps, snn::DEFAULT_TIMESTEPS)?;
    let shift = match s.get("output-shift", a.output_shift, "auto".to_string())?.as_str() {
        "auto" => OutputShift::Auto,
        v => OutputShift::Fixed(v.parse().map_err(|_| CliError::Usage(format!("--output-shift must be auto or a number, got {v:?}")))?),
    };
    s.finish()?;
    let mut run = Run::start("convert");
    let model = read_model(&model_path)?;
    let calib = read_dataset(&calib_path)?;
    run.input(&model_path);
    run.input(&calib_path);
    let opts = ConvertOptions { percentile, eval_timesteps: (eval > 0).then_some(eval), output_shift: shift };
    let (net, report) = snn::normalize_and_convert_with(&model, &calib, &opts)?;
    save_snn(&net, &out)?;
    write(&report_path, &report.to_csv())?;
    run.output(&out);
    run.output(&report_path);
    run.extra = json!({ "lambdas": report.lambdas, "neurons": net.neuron_count(), "conversion_gap": report.conversion_gap() });
    run.finish(&s.resolved)?;
    println!("converted {} populations ({} neurons); lambdas {:?}", net.layers().len(), net.neuron_count(), report.lambdas);
    println!(
        "calibration accuracy: ann {:.4}{}",
        report.ann_accuracy,
        report
            .snn_accuracy
            .map(|v| format!(", snn {v:.4}, conversion_gap {:.4}", report.ann_accuracy - v))
            .unwrap_or_default()
    );
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let snn_path = s.path("snn", a.snn)?;
    let data_path = s.path("data", a.data)?;
    let timesteps = s.get("T", a.timesteps, snn::DEFAULT_TIMESTEPS)?;
    let enc = s.opt::<String>("encoder", a.encoder)?;
    let max_rate_scale = s.get("max-rate-scale", a.max_rate_scale, 1.0f32)?;
    let sweep = s.opt::<String>("sweep-T", a.sweep)?;
    let seed = s.get("seed", a.common.seed, 0)?;
    let out = s.path("out", a.out)?;
    let trace = s.opt_path("trace", a.trace)?;
    let trace_index = s.get("trace-index", a.trace_index, 0)?;
    s.finish()?;
    let mut run = Run::start("simulate");
    let net = read_snn(&snn_path)?;
    let ds = read_dataset(&data_path)?;
    run.input(&snn_path);
    run.input(&data_path);
    let encoder = match enc {
        Some(e) => encoder(&e)?,
        None => net.encoding(),
    };
    let cfg = SimConfig { timesteps, encoder, max_rate_scale, seed };
    if let Some(list) = sweep {
        let t_list: Vec<usize> = parse::list(&list, "timestep")?;
        let rows = timestep_sweep(&net, &ds, &t_list, &cfg).map_err(|e| match e {
            neuromed::Error::Contract(m) => CliError::Usage(m),
            other => other.into(),
        })?;
        let csv = sweep_csv(&rows);
        write(&out, &csv)?;
        print!("{csv}");
    } else {
        let preds = snn::predict_dataset(&net, &ds, &cfg)?;
        let report = MetricsReport::new(&preds, ds.labels(), ds.class_count())?;
        write(&out, &metrics_csv(&report, ds.class_names()))?;
        println!("accuracy {:.4}, mcc {:.4}, f1 {:.4} over {} samples at T={timesteps}", report.accuracy, report.mcc, report.f1, ds.len());
    }
    run.output(&out);
    if let Some(t) = &trace {
        if trace_index >= ds.len() {
            return Err(CliError::Usage(format!("--trace-index {trace_index} out of range for {} samples", ds.len())));
        }
        let tr = snn::run_inference(&net, ds.image(trace_index), &cfg, trace_index as u64)?;
        write(t, &tr.to_csv())?;
        run.output(t);
    }
    run.finish(&s.resolved)?;
    Ok(())
}

enum Subject {
    Ann(ModelGraph),
    Snn(SpikingNetwork),
}

fn load_subject(path: &Path) -> Result<Subject, CliError> {
    let mut magic = [0u8; 4];
    use std::io::Read as _;
    std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    if &magic == snn::network::MAGIC {
        read_snn(path).map(Subject::Snn)
    } else {
        read_model(path).map(Subject::Ann)
    }
}

/// Inferences per second over at least `inferences` single-sample runs; median of `runs`.
fn throughput(subject: &Subject, ds: &LabeledImageSet, cfg: &SimConfig, inferences: usize, runs: usize) -> Result<f64, CliError> {
    let mut rates = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        for i in 0..inferences {
            let j = i % ds.len();
            match subject {
                Subject::Ann(m) => {
                    m.predict_sample(&ds.image_tensor(j))?;
                }
                Subject::Snn(n) => {
                    snn::run_inference(n, ds.image(j), cfg, j as u64)?;
                }
            }
        }
        rates.push(inferences as f64 / start.elapsed().as_secs_f64());
    }
    rates.sort_by(f64::total_cmp);
    Ok(rates[rates.len() / 2])
}

pub fn benchmark(a: BenchmarkArgs) -> Result<(), CliError> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let models = parse::named_paths(&s.get("models", a.models, String::new())?)?;
    let data_path = s.opt_path("data", a.data)?;
    let train_path = s.opt_path("train-data", a.train_data)?;
    let fraction = s.get("fraction", a.fraction, 0.1)?;
    let eff_epochs = s.get("efficiency-epochs", a.efficiency_epochs, 10)?;
    let energy_path = s.opt_path("energy-config", a.energy_config)?;
    let timesteps = s.get("T", a.timesteps, snn::DEFAULT_TIMESTEPS)?;
    let enc = s.opt::<String>("encoder", a.encoder)?;
    let inferences = s.get("throughput-inferences", a.throughput_inferences, 1000)?;
    let runs = s.get("throughput-runs", a.throughput_runs, 3)?;
    let seed = s.get("seed", a.common.seed, 0)?;
    let out = s.path("out", a.out)?;
    s.finish()?;
    if !models.is_empty() && data_path.is_none() {
        return Err(CliError::Usage("--data is required when --models is given".into()));
    }
    if models.is_empty() && energy_path.is_none() {
        return Err(CliError::Usage("nothing to benchmark: give --models and/or --energy-config".into()));
    }
    if inferences == 0 || runs == 0 {
        return Err(CliError::Usage("throughput needs at least one inference and one run".into()));
    }
    let mut run = Run::start("benchmark");
    let energy = match &energy_path {
        Some(p) => {
            run.input(p);
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            parse::energy_config(&text, &p.display().to_string())?
        }
        None => Vec::new(),
    };
    let test = data_path.as_deref().map(read_dataset).transpose()?;
    if let Some(p) = &data_path {
        run.input(p);
    }
    let train_small = match &train_path {
        Some(p) => {
            run.input(p);
            Some(subsample_fraction(&read_dataset(p)?, fraction, seed)?)
        }
        None => None,
    };

    let mut rows: Vec<ApproachRow> = Vec::new();
    let mut timing = Table::new(["Approach", "Inferences per second"]);
    for (name, path) in &models {
        run.input(path);
        let test = test.as_ref().expect("checked above");
        let subject = load_subject(path)?;
        let cfg = SimConfig {
            timesteps,
            encoder: match (&enc, &subject) {
                (Some(e), _) => encoder(e)?,
                (None, Subject::Snn(n)) => n.encoding(),
                (None, Subject::Ann(_)) => Encoding::ConstantCurrent,
            },
            max_rate_scale: 1.0,
            seed,
        };
        let (acc, acc_small) = match &subject {
            Subject::Ann(m) => {
                let small = match &train_small {
                    Some(tr) => {
                        let fresh = ModelGraph::new(m.input_shape(), m.class_count(), m.layers().to_vec(), seed)?;
                        let cfg = TrainConfig { epochs: eff_epochs, loss: loss_for(&fresh), seed, ..TrainConfig::default() };
                        let (trained, _) = train_with_validation(&fresh, tr, None, &cfg)?;
                        Some(ann_accuracy(&trained, test)?)
                    }
                    None => None,
                };
                (ann_accuracy(m, test)?, small)
            }
            Subject::Snn(n) => (snn::sim::accuracy(n, test, &cfg)?, None),
        };
        let ips = throughput(&subject, test, &cfg, inferences, runs)?;
        let e = energy.iter().find(|r| &r.name == name);
        timing.push([name.clone(), format!("{ips:.1}")]);
        rows.push(ApproachRow {
            approach: name.clone(),
            test_accuracy: Some(acc),
            accuracy_10pct: acc_small,
            energy: e.map(|r| (r.joules, r.upper)),
            inferences_per_second: Some(ips),
        });
    }
    for e in energy.iter().filter(|e| !models.iter().any(|(n, _)| n == &e.name)) {
        rows.push(ApproachRow { approach: e.name.clone(), test_accuracy: None, accuracy_10pct: None, energy: Some((e.joules, e.upper)), inferences_per_second: None });
    }
    let table = approach_table(&rows);
    write(&out, &table.to_csv())?;
    let md_path = sibling(&out, ".md");
    let mut md = table.to_markdown();
    let _ = write!(md, "\nReduced-data column: stratified fraction {fraction} of the training set, {eff_epochs} epochs.\n");
    write(&md_path, &md)?;
    run.output(&out);
    run.output(&md_path);
    if !models.is_empty() {
        // Wall-clock throughput varies between runs, so it lives in its own file.
        let tp = sibling(&out, ".throughput.csv");
        write(&tp, &timing.to_csv())?;
        run.output(&tp);
    }
    run.finish(&s.resolved)?;
    print!("{}", table.to_markdown());
    if !models.is_empty() {
        println!();
        print!("{}", timing.to_markdown());
    }
    Ok(())
}

pub fn explain(a: ExplainArgs) -> Result<(), CliError> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let model_path = s.path("model", a.model)?;
    let data_path = s.path("data", a.data)?;
    let index = s.get("image", a.image, 0)?;
    let capsule = s.opt("capsule", a.capsule)?;
    let dims: Vec<usize> = parse::index_set(&s.get("dims", a.dims, "0..4".to_string())?)?.into_iter().collect();
    let deltas: Vec<f32> = match s.opt::<String>("deltas", a.deltas)? {
        Some(t) => parse::list(&t, "delta")?,
        None => default_deltas(),
    };
    let out = s.path("out", a.out)?;
    s.finish()?;
    if deltas.is_empty() || dims.is_empty() {
        return Err(CliError::Usage("need at least one dimension and one delta".into()));
    }
    let mut run = Run::start("explain");
    let model = read_model(&model_path)?;
    let ds = read_dataset(&data_path)?;
    run.input(&model_path);
    run.input(&data_path);
    if index >= ds.len() {
        return Err(CliError::Usage(format!("--image {index} out of range for {} samples", ds.len())));
    }
    let image = ds.image_tensor(index);
    let capsule = match capsule {
        Some(c) => c,
        None => neuromed::tensor::argmax(model.predict_sample(&image)?.data()),
    };
    let rows: Vec<Vec<Tensor>> = dims
        .par_iter()
        .map(|&d| perturb_and_decode(&model, &image, capsule, d, &deltas))
        .collect::<Result<_, _>>()?;
    let cells: Vec<f32> = rows.into_iter().flatten().flat_map(|t| t.data().to_vec()).collect();
    let [c, h, w] = model.input_shape();
    let n = dims.len() * deltas.len();
    let grid = LabeledImageSet::new(
        Tensor::new(vec![n, c, h, w], cells)?,
        vec![capsule; n],
        (0..n as u32).collect(),
        ds.class_names().to_vec(),
    )?;
    save_dataset(&grid, &out)?;
    let map_path = sibling(&out, ".grid.csv");
    let mut map = String::from("index,row,col,capsule,dim,delta\n");
    for (r, &d) in dims.iter().enumerate() {
        for (col, &delta) in deltas.iter().enumerate() {
            let _ = writeln!(map, "{},{r},{col},{capsule},{d},{delta}", r * deltas.len() + col);
        }
    }
    write(&map_path, &map)?;
    run.output(&out);
    run.output(&map_path);
    run.extra = json!({ "capsule": capsule, "label": ds.label(index), "rows": dims.len(), "cols": deltas.len() });
    run.finish(&s.resolved)?;
    println!("wrote {}x{} grid for capsule {capsule} to {}", dims.len(), deltas.len(), out.display());
    Ok(())
}

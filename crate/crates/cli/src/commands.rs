use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use deepfeaturex::basemodel::{train_base_model, BaseModel, BaseModelConfig};
use deepfeaturex::data::synth::{write_toy_corpus, ToyCorpusSpec};
use deepfeaturex::data::{
    assemble_generalization_set, carve_validation, ingest, make_unbalanced_subset, split_three_way,
    ClassLabel, GenBenchSpec, LabelRule, Manifest,
};
use deepfeaturex::eval::{
    emit_report, evaluate_logged, generalization_eval, render_report, robustness_sweep, Report,
};
use deepfeaturex::fusion::{train_head, FusionModel, BASE_ORDER};
use deepfeaturex::nn::class_weights;
use serde_json::json;

use crate::config::RunConfig;
use crate::workdir::{load_manifest, write_run_meta, Workdir};
use crate::{ClassArg, Cli, Command, Format, Invalid};

const SPLIT_NAMES: [&str; 5] = ["base_train", "base_val", "head_train", "head_val", "test"];

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::ToyCorpus { out, per_tag, size } = &cli.command {
        return toy_corpus(&cfg, out, *per_tag, *size);
    }
    if let Command::Report { input, output } = &cli.command {
        return report(cli.format, input, output.as_deref());
    }
    let wd = Workdir::new(cli.workdir.clone());
    let _lock = wd.lock()?;
    match &cli.command {
        Command::Ingest { corpus } => ingest_cmd(&wd, &cfg, corpus.as_deref()),
        Command::Split => split(&wd, &cfg),
        Command::MakeSubsets => make_subsets(&wd, &cfg),
        Command::TrainBase { class } => train_base(&wd, &cfg, *class),
        Command::TrainHead => train_head_cmd(&wd, &cfg),
        Command::Eval => eval(&wd, &cfg, cli.format),
        Command::Robustness => robustness(&wd, &cfg, cli.format),
        Command::Genbench {
            spec,
            pool,
            assemble_only,
        } => genbench(
            &wd,
            &cfg,
            cli.format,
            spec.as_deref(),
            pool.as_deref(),
            *assemble_only,
        ),
        Command::ToyCorpus { .. } | Command::Report { .. } => unreachable!("handled above"),
    }
}

fn print(v: serde_json::Value) {
    println!("{v}");
}

fn toy_corpus(cfg: &RunConfig, out: &Path, per_tag: usize, size: u32) -> Result<()> {
    if per_tag == 0 || size < 8 {
        return Err(Invalid(format!(
            "toy corpus needs per_tag > 0 and size >= 8, got {per_tag}, {size}"
        ))
        .into());
    }
    let n = write_toy_corpus(out, &ToyCorpusSpec::standard(per_tag, size, cfg.seed))?;
    print(json!({ "toy_corpus": out, "images": n }));
    Ok(())
}

fn ingest_cmd(wd: &Workdir, cfg: &RunConfig, corpus: Option<&Path>) -> Result<()> {
    let root = corpus
        .map(Path::to_path_buf)
        .or_else(|| cfg.corpus.clone())
        .ok_or_else(|| Invalid("no corpus root: pass --corpus or set `corpus`".into()))?;
    if !root.is_dir() {
        return Err(Invalid(format!("corpus root {} is not a directory", root.display())).into());
    }
    let report = ingest(&root, &LabelRule::default_layout())?;
    for (path, why) in &report.skipped {
        eprintln!("skipped {}: {why}", path.display());
    }
    let out = wd.save_manifest("corpus", &report.manifest)?;
    write_run_meta(wd, &wd.manifests(), "ingest", cfg, &[], &[out])?;
    print(json!({
        "records": report.manifest.len(),
        "class_counts": counts(&report.manifest),
        "skipped": report.skipped.len(),
    }));
    Ok(())
}

fn counts(m: &Manifest) -> serde_json::Value {
    let c = m.class_counts();
    json!({ "real": c[0], "gan": c[1], "dm": c[2] })
}

fn split(wd: &Workdir, cfg: &RunConfig) -> Result<()> {
    let input = wd.manifest("corpus");
    let corpus = load_manifest(&input)?;
    let [base, head, test] = split_three_way(&corpus, cfg.split_fractions, cfg.seed)?;
    let (base_train, base_val) = carve_validation(&base, cfg.val_fraction, cfg.seed)?;
    let (head_train, head_val) = carve_validation(&head, cfg.val_fraction, cfg.seed)?;
    let parts = [base_train, base_val, head_train, head_val, test];
    let mut outputs = Vec::new();
    let mut summary = serde_json::Map::new();
    for (name, m) in SPLIT_NAMES.iter().zip(&parts) {
        outputs.push(wd.save_manifest(name, m)?);
        summary.insert((*name).into(), counts(m));
    }
    write_run_meta(wd, &wd.manifests(), "split", cfg, &[input], &outputs)?;
    print(summary.into());
    Ok(())
}

fn make_subsets(wd: &Workdir, cfg: &RunConfig) -> Result<()> {
    let input = wd.manifest("base_train");
    let base_train = load_manifest(&input)?;
    let mut outputs = Vec::new();
    let mut summary = serde_json::Map::new();
    for class in ClassLabel::ALL {
        let sub = make_unbalanced_subset(&base_train, class, cfg.unbalance_ratio, cfg.seed)?;
        summary.insert(
            class.to_string(),
            json!({ "total": sub.len(), "predominant": sub.count(class), "class_counts": counts(&sub) }),
        );
        let path = wd.subset(class);
        fs::create_dir_all(wd.manifests())?;
        sub.save(&path)?;
        outputs.push(path);
    }
    write_run_meta(wd, &wd.manifests(), "make-subsets", cfg, &[input], &outputs)?;
    print(summary.into());
    Ok(())
}

/// The configured base template with seeds offset by class index, so the
/// three base models start from different initializations.
fn base_config(cfg: &RunConfig, class: ClassLabel) -> BaseModelConfig {
    let k = class.index() as u64;
    let mut c = cfg.base.clone();
    c.backbone.seed = c.backbone.seed.wrapping_add(k);
    c.optim.seed = c.optim.seed.wrapping_add(k);
    c.head_seed = c.head_seed.wrapping_add(k);
    c
}

fn train_base(wd: &Workdir, cfg: &RunConfig, class: ClassArg) -> Result<()> {
    let class = ClassLabel::from(class);
    let sub_path = wd.subset(class);
    let val_path = wd.manifest("base_val");
    let subset = load_manifest(&sub_path)?;
    let val = load_manifest(&val_path)?.relabel_binary(class);
    let bm = train_base_model(&subset, &val, class, &base_config(cfg, class))
        .with_context(|| format!("training the {class} base model"))?;
    let dir = wd.base_model(class);
    bm.save(&dir)?;
    write_run_meta(
        wd,
        &dir,
        "train-base",
        cfg,
        &[sub_path, val_path],
        std::slice::from_ref(&dir),
    )?;
    print(json!({
        "class": class,
        "selected_epoch": bm.selected_epoch,
        "epochs": bm.training_log.epochs,
        "digest": bm.digest(),
    }));
    Ok(())
}

fn load_base(wd: &Workdir, class: ClassLabel) -> Result<BaseModel> {
    let dir = wd.base_model(class);
    if !dir.is_dir() {
        return Err(Invalid(format!(
            "missing base model {}; run `train-base --class {class}` first",
            dir.display()
        ))
        .into());
    }
    Ok(BaseModel::load(&dir)?)
}

fn train_head_cmd(wd: &Workdir, cfg: &RunConfig) -> Result<()> {
    let train_path = wd.manifest("head_train");
    let val_path = wd.manifest("head_val");
    let train = load_manifest(&train_path)?;
    let val = load_manifest(&val_path)?;
    let [dm, gan, real] = BASE_ORDER.map(|c| load_base(wd, c));
    let fm = FusionModel::new(dm?, gan?, real?, cfg.head.head.clone())?;
    let weights = class_weights(&train)?;
    let fm = train_head(fm, &train, &val, weights, &cfg.head.optim)?;
    let dir = wd.fusion_model();
    fm.save(&dir)?;
    let mut inputs = vec![train_path, val_path];
    inputs.extend(BASE_ORDER.map(|c| wd.base_model(c)));
    write_run_meta(
        wd,
        &dir,
        "train-head",
        cfg,
        &inputs,
        std::slice::from_ref(&dir),
    )?;
    print(json!({
        "selected_epoch": fm.selected_epoch,
        "epochs": fm.training_log.epochs,
        "class_weights": weights,
    }));
    Ok(())
}

fn load_fusion(wd: &Workdir) -> Result<FusionModel> {
    let dir = wd.fusion_model();
    if !dir.is_dir() {
        return Err(Invalid(format!(
            "missing fusion model {}; run `train-head` first",
            dir.display()
        ))
        .into());
    }
    Ok(FusionModel::load(&dir)?)
}

/// Writes `report` as `<name>.json` (always, for `report` to re-render) and
/// as `<name>.<ext>` in the requested format.
fn write_report(wd: &Workdir, name: &str, report: &Report, format: Format) -> Result<Vec<PathBuf>> {
    let json_path = wd.reports().join(format!("{name}.json"));
    emit_report(report, Format::Json.report_format(), &json_path)?;
    let mut out = vec![json_path];
    if format != Format::Json {
        let path = wd.reports().join(format!("{name}.{}", format.extension()));
        emit_report(report, format.report_format(), &path)?;
        out.push(path);
    }
    Ok(out)
}

fn eval(wd: &Workdir, cfg: &RunConfig, format: Format) -> Result<()> {
    let test_path = wd.manifest("test");
    let test = load_manifest(&test_path)?;
    let fm = load_fusion(wd)?;
    fs::create_dir_all(wd.reports())?;
    let log = wd.reports().join("predictions.jsonl");
    let (multi, binary) = evaluate_logged(&fm, &test, "raw", Some(&log))?;
    let report = Report {
        title: "Evaluation".into(),
        rows: vec![multi.clone(), binary.clone()],
    };
    let mut outputs = write_report(wd, "eval", &report, format)?;
    outputs.push(log);
    write_run_meta(
        wd,
        &wd.reports(),
        "eval",
        cfg,
        &[test_path, wd.fusion_model()],
        &outputs,
    )?;
    print(json!({ "multiclass": multi, "binary": binary }));
    Ok(())
}

fn robustness(wd: &Workdir, cfg: &RunConfig, format: Format) -> Result<()> {
    let test_path = wd.manifest("test");
    let test = load_manifest(&test_path)?;
    let fm = load_fusion(wd)?;
    let sweep = robustness_sweep(&fm, &test, &cfg.qf_list, &wd.jpeg())?;
    let report = sweep.to_report();
    let outputs = write_report(wd, "robustness", &report, format)?;
    write_run_meta(
        wd,
        &wd.reports(),
        "robustness",
        cfg,
        &[test_path, wd.fusion_model()],
        &outputs,
    )?;
    let rows: Vec<_> = sweep
        .rows
        .iter()
        .map(|r| json!({ "setting": r.setting, "multiclass_accuracy": r.multiclass.accuracy, "binary_accuracy": r.binary.accuracy }))
        .collect();
    print(json!({ "rows": rows }));
    Ok(())
}

fn read_specs(path: &Path) -> Result<Vec<GenBenchSpec>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Invalid(format!("bench spec {}: {e}", path.display())))?;
    let parsed = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|s| vec![s])
    };
    Ok(parsed.map_err(|e| Invalid(format!("bench spec {}: {e}", path.display())))?)
}

fn safe_name(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn genbench(
    wd: &Workdir,
    cfg: &RunConfig,
    format: Format,
    spec: Option<&Path>,
    pool: Option<&Path>,
    assemble_only: bool,
) -> Result<()> {
    let specs = match spec {
        Some(p) => read_specs(p)?,
        None => cfg.benches.clone(),
    };
    if specs.is_empty() {
        return Err(Invalid("no benches: pass --spec or set `benches`".into()).into());
    }
    let pool_path = pool
        .map(Path::to_path_buf)
        .unwrap_or_else(|| wd.manifest("corpus"));
    let pool = load_manifest(&pool_path)?;
    let mut benches = Vec::with_capacity(specs.len());
    let mut outputs = Vec::new();
    let mut summary = serde_json::Map::new();
    for s in &specs {
        let m = assemble_generalization_set(&pool, s)?;
        outputs.push(wd.save_manifest(&format!("bench_{}", safe_name(&s.name)), &m)?);
        summary.insert(s.name.clone(), counts(&m));
        benches.push((s.name.clone(), m));
    }
    write_run_meta(
        wd,
        &wd.manifests(),
        "genbench",
        cfg,
        std::slice::from_ref(&pool_path),
        &outputs,
    )?;
    if assemble_only {
        print(json!({ "benches": summary }));
        return Ok(());
    }
    let fm = load_fusion(wd)?;
    let report = generalization_eval(&fm, &benches)?;
    let mut inputs = vec![pool_path, wd.fusion_model()];
    inputs.extend(outputs);
    let written = write_report(wd, "genbench", &report.to_report(), format)?;
    write_run_meta(wd, &wd.reports(), "genbench", cfg, &inputs, &written)?;
    let acc: serde_json::Map<String, serde_json::Value> = report
        .rows
        .iter()
        .map(|r| (r.setting.clone(), json!(r.accuracy)))
        .collect();
    print(json!({ "benches": summary, "accuracy": acc }));
    Ok(())
}

fn report(format: Format, input: &Path, output: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let report: Report = serde_json::from_str(&text)
        .map_err(|e| Invalid(format!("{} is not a JSON report: {e}", input.display())))?;
    match output {
        Some(path) => emit_report(&report, format.report_format(), path)?,
        None => print!("{}", render_report(&report, format.report_format())?),
    }
    Ok(())
}

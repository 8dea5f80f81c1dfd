//! The `saff` executable.
//!
//! Subcommands: `gen-data`, `pretrain`, `train`, `eval`, `ablate`,
//! `sweep-alpha`, `verify-bound`, `analyze`. Every configuration key is a
//! `--key value` flag (`--loss.alpha 1.0`); a `--config file` loads the
//! same keys first and explicit flags override it. Unknown flags are
//! rejected. Progress goes to standard error; tabular output goes to CSV
//! files under a per-run directory named by timestamp and seed (`gen-data`
//! writes its files directly into `--out` so reruns are byte-comparable).
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 runtime divergence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::analysis;
use crate::config::TrainConfig;
use crate::data::{gen_synthetic, load_csv, save_csv, Dataset, Domain};
use crate::error::{Error, Result};
use crate::model::{forward, predict, ModelParams};
use crate::pipeline::{
    ablate, evaluate, pretrain_source, sweep_alpha, train, write_epoch_csv,
    write_metrics_csv,
};
use crate::tape::Tape;
use crate::theory;

pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => 2,
                _ => 1,
            }
        }
    }
}

const USAGE: &str = "usage: saff <gen-data|pretrain|train|eval|ablate|sweep-alpha|verify-bound|analyze> [--flag value]...";

fn dispatch(args: &[String]) -> Result<()> {
    let command = args
        .first()
        .ok_or_else(|| Error::validation(USAGE.to_string()))?;
    let flags = Flags::parse(&args[1..])?;
    match command.as_str() {
        "gen-data" => cmd_gen_data(flags),
        "pretrain" => cmd_pretrain(flags),
        "train" => cmd_train(flags),
        "eval" => cmd_eval(flags),
        "ablate" => cmd_ablate(flags),
        "sweep-alpha" => cmd_sweep_alpha(flags),
        "verify-bound" => cmd_verify_bound(flags),
        "analyze" => cmd_analyze(flags),
        other => Err(Error::validation(format!(
            "unknown subcommand {other:?}; {USAGE}"
        ))),
    }
}

/// Parsed `--key value` pairs, consumed by each subcommand; anything left
/// unconsumed at the end is an unknown flag.
struct Flags {
    values: BTreeMap<String, String>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Flags> {
        let mut values = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let key = args[i]
                .strip_prefix("--")
                .ok_or_else(|| Error::validation(format!("expected --flag, got {:?}", args[i])))?;
            let value = args.get(i + 1).ok_or_else(|| {
                Error::validation(format!("flag --{key} is missing its value"))
            })?;
            if values.insert(key.to_string(), value.clone()).is_some() {
                return Err(Error::validation(format!("flag --{key} given twice")));
            }
            i += 2;
        }
        Ok(Flags { values })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    fn require(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::validation(format!("missing required flag --{key}")))
    }

    /// Load `--config`, apply every remaining config-key flag, reject leftovers.
    fn into_config(mut self) -> Result<TrainConfig> {
        let mut config = match self.take("config") {
            Some(path) => TrainConfig::load(Path::new(&path))?,
            None => TrainConfig::default(),
        };
        let keys: Vec<String> = self.values.keys().cloned().collect();
        for key in keys {
            let value = self.values.remove(&key).expect("key listed");
            config.set(&key, &value)?;
        }
        config.validate()?;
        Ok(config)
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.values.keys().next() {
            return Err(Error::validation(format!("unknown flag --{key}")));
        }
        Ok(())
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::validation(format!("bad {what} entry {s:?}")))
        })
        .collect()
}

/// `<out>/run-<unix seconds>-seed<seed>/`, with the resolved config inside.
fn make_run_dir(out: &str, seed: u64, config: Option<&TrainConfig>) -> Result<PathBuf> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let dir = Path::new(out).join(format!("run-{stamp}-seed{seed}"));
    std::fs::create_dir_all(&dir)?;
    if let Some(config) = config {
        config.save(&dir.join("config.resolved"))?;
    }
    Ok(dir)
}

fn load_dataset_dir(dir: &str) -> Result<(Dataset, Dataset, Dataset)> {
    let base = Path::new(dir);
    let probe = load_csv(&base.join("source.csv"), Domain::Source, 0)?;
    let class_count = probe
        .samples
        .iter()
        .filter_map(|s| s.label)
        .max()
        .map(|m| m + 1)
        .ok_or_else(|| Error::validation("source.csv has no labels"))?;
    let mut source = probe;
    source.class_count = class_count;
    let target_train = load_csv(&base.join("target_train.csv"), Domain::Target, class_count)?;
    let target_eval = load_csv(&base.join("target_eval.csv"), Domain::Target, class_count)?;
    Ok((source, target_train, target_eval))
}

/// Make the config's data/model fields agree with a loaded dataset.
fn sync_config_to_data(config: &mut TrainConfig, source: &Dataset) {
    config.data_classes = source.class_count;
    config.data_dim = source.dim;
    config.data_per_domain = source.len();
}

// ── Subcommands ─────────────────────────────────────────────────────────

fn cmd_gen_data(mut flags: Flags) -> Result<()> {
    let out = flags.require("out")?;
    let config = flags.into_config()?;
    let spec = config.domain_spec();
    let (source, target_train, target_eval) =
        gen_synthetic(&spec, config.data_per_domain, config.seed)?;
    std::fs::create_dir_all(&out)?;
    let base = Path::new(&out);
    save_csv(&source, &base.join("source.csv"))?;
    save_csv(&target_train, &base.join("target_train.csv"))?;
    save_csv(&target_eval, &base.join("target_eval.csv"))?;
    config.save(&base.join("gen.resolved"))?;
    eprintln!(
        "wrote {} samples per domain to {}",
        config.data_per_domain, out
    );
    Ok(())
}

fn cmd_pretrain(mut flags: Flags) -> Result<()> {
    let data = flags.require("data")?;
    let out = flags.take("out").unwrap_or_else(|| "runs".to_string());
    let mut config = flags.into_config()?;
    let (source, _, _) = load_dataset_dir(&data)?;
    sync_config_to_data(&mut config, &source);
    let dir = make_run_dir(&out, config.seed, Some(&config))?;
    eprintln!("pretraining for {} epochs", config.pretrain_epochs);
    let params = pretrain_source(&config, &source)?;
    params.save(&dir.join("pretrained.bin"))?;
    let accuracy = evaluate(&params, &source)?;
    write_kv_csv(&dir.join("pretrain.csv"), &[("source_accuracy", accuracy)])?;
    eprintln!("source accuracy {accuracy:.4}; checkpoint in {}", dir.display());
    Ok(())
}

fn cmd_train(mut flags: Flags) -> Result<()> {
    let data = flags.require("data")?;
    let out = flags.take("out").unwrap_or_else(|| "runs".to_string());
    let checkpoint = flags.take("checkpoint");
    let mut config = flags.into_config()?;
    let (source, target_train, target_eval) = load_dataset_dir(&data)?;
    sync_config_to_data(&mut config, &source);
    let dir = make_run_dir(&out, config.seed, Some(&config))?;
    let pretrained = match checkpoint {
        Some(path) => Some(ModelParams::load(Path::new(&path))?),
        None => None,
    };
    eprintln!(
        "training {} epochs (pretrain {})",
        config.epochs,
        if pretrained.is_some() {
            "from checkpoint".to_string()
        } else {
            format!("{} epochs", config.pretrain_epochs)
        }
    );
    let outcome = train(&config, &source, &target_train, Some(&target_eval), pretrained)?;
    write_epoch_csv(&outcome.reports, &dir.join("epochs.csv"))?;
    write_metrics_csv(&outcome.reports, &dir.join("metrics.csv"))?;
    outcome.params.save(&dir.join("model.bin"))?;
    outcome.bank.save(&dir.join("bank.bin"))?;
    let last = outcome.reports.last().expect("at least one epoch");
    eprintln!(
        "done: source {:.4}, target {:.4}, distance {:.5}; outputs in {}",
        last.source_accuracy,
        last.target_accuracy,
        last.inter_domain_distance,
        dir.display()
    );
    Ok(())
}

fn cmd_eval(mut flags: Flags) -> Result<()> {
    let checkpoint = flags.require("checkpoint")?;
    let csv = flags.require("csv")?;
    let out = flags.take("out").unwrap_or_else(|| "runs".to_string());
    flags.finish()?;
    let params = ModelParams::load(Path::new(&checkpoint))?;
    let set = load_csv(Path::new(&csv), Domain::Target, params.dims.class_count)?;
    let accuracy = evaluate(&params, &set)?;
    let dir = make_run_dir(&out, 0, None)?;
    write_kv_csv(&dir.join("eval.csv"), &[("accuracy", accuracy)])?;
    eprintln!("accuracy {accuracy:.4}; written to {}", dir.display());
    Ok(())
}

fn cmd_ablate(mut flags: Flags) -> Result<()> {
    let data = flags.require("data")?;
    let out = flags.take("out").unwrap_or_else(|| "runs".to_string());
    let seeds: Vec<u64> = match flags.take("seeds") {
        Some(raw) => parse_list(&raw, "seed")?,
        None => vec![1, 2, 3, 4, 5],
    };
    let mut config = flags.into_config()?;
    let (source, target_train, target_eval) = load_dataset_dir(&data)?;
    sync_config_to_data(&mut config, &source);
    let dir = make_run_dir(&out, config.seed, Some(&config))?;
    let results = ablate(
        &config,
        &source,
        &target_train,
        &target_eval,
        &seeds,
        |msg| eprintln!("ablate: {msg}"),
    )?;
    let mut w = String::from("row,ssid,discrimination,style,mean_target_accuracy,mean_distance");
    for (i, _) in seeds.iter().enumerate() {
        w.push_str(&format!(",acc_seed{i}"));
    }
    w.push('\n');
    for r in &results {
        w.push_str(&format!(
            "{},{},{},{},{},{}",
            r.row.name,
            r.row.ssid,
            r.row.discrimination,
            r.row.style,
            r.mean_accuracy,
            r.mean_distance
        ));
        for a in &r.per_seed_accuracy {
            w.push_str(&format!(",{a}"));
        }
        w.push('\n');
    }
    std::fs::write(dir.join("ablation.csv"), w)?;
    eprintln!("ablation table in {}", dir.display());
    Ok(())
}

fn cmd_sweep_alpha(mut flags: Flags) -> Result<()> {
    let data = flags.require("data")?;
    let out = flags.take("out").unwrap_or_else(|| "runs".to_string());
    let values: Vec<f64> = match flags.take("values") {
        Some(raw) => parse_list(&raw, "alpha")?,
        None => vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.0, 1.1, 1.3, 1.5],
    };
    let mut config = flags.into_config()?;
    let (source, target_train, target_eval) = load_dataset_dir(&data)?;
    sync_config_to_data(&mut config, &source);
    let dir = make_run_dir(&out, config.seed, Some(&config))?;
    let points = sweep_alpha(
        &config,
        &source,
        &target_train,
        &target_eval,
        &values,
        |msg| eprintln!("sweep: {msg}"),
    )?;
    let mut w = String::from("alpha,target_accuracy,source_accuracy\n");
    for p in &points {
        w.push_str(&format!(
            "{},{},{}\n",
            p.alpha, p.target_accuracy, p.source_accuracy
        ));
    }
    std::fs::write(dir.join("sweep_alpha.csv"), w)?;
    eprintln!("sweep table in {}", dir.display());
    Ok(())
}

fn cmd_verify_bound(mut flags: Flags) -> Result<()> {
    let out = flags.take("out").unwrap_or_else(|| "runs".to_string());
    let schedule: Vec<usize> = match flags.take("M") {
        Some(raw) => parse_list(&raw, "draw count")?,
        None => vec![1_000, 10_000, 100_000],
    };
    let seeds: Vec<u64> = match flags.take("seeds") {
        Some(raw) => parse_list(&raw, "seed")?,
        None => vec![1, 2, 3, 4],
    };
    let classes: usize = match flags.take("classes") {
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::validation(format!("bad class count {raw:?}")))?,
        None => 5,
    };
    let dim: usize = match flags.take("dim") {
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::validation(format!("bad dimension {raw:?}")))?,
        None => 16,
    };
    let proportions: Option<Vec<f64>> = match flags.take("proportions") {
        Some(raw) => Some(parse_list(&raw, "proportion")?),
        None => None,
    };
    let seed: u64 = match flags.take("seed") {
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::validation(format!("bad seed {raw:?}")))?,
        None => 7,
    };
    flags.finish()?;

    let (mut model, clf, labels) = theory::seeded_configuration(seed, classes, dim);
    if let Some(p) = proportions {
        if p.len() != classes {
            return Err(Error::validation(format!(
                "{} proportions for {classes} classes",
                p.len()
            )));
        }
        model.proportions = p;
        model.validate()?;
    }
    eprintln!(
        "verifying bound over draws {:?} with {} seeds",
        schedule,
        seeds.len()
    );
    let rows = theory::convergence_report(&model, &clf, &labels, &schedule, &seeds)?;
    let dir = make_run_dir(&out, seed, None)?;
    let mut w = String::from("M,estimate,stderr,bound,gap,cauchy_pass\n");
    for r in &rows {
        w.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.draws, r.estimate, r.stderr, r.bound, r.gap, r.cauchy_pass
        ));
    }
    std::fs::write(dir.join("verify_bound.csv"), w)?;
    for r in &rows {
        eprintln!(
            "M={:<9} estimate={:.6} stderr={:.6} bound={:.6} gap={:+.6} cauchy={}",
            r.draws, r.estimate, r.stderr, r.bound, r.gap, r.cauchy_pass
        );
    }
    eprintln!("report in {}", dir.display());
    Ok(())
}

fn cmd_analyze(mut flags: Flags) -> Result<()> {
    let checkpoint = flags.require("checkpoint")?;
    let data = flags.require("data")?;
    let out = flags.take("out").unwrap_or_else(|| "runs".to_string());
    let projection_dim: usize = match flags.take("projection-dim") {
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::validation(format!("bad projection dimension {raw:?}")))?,
        None => 8,
    };
    let bins: usize = match flags.take("bins") {
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::validation(format!("bad bin count {raw:?}")))?,
        None => 50,
    };
    let seed: u64 = match flags.take("seed") {
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::validation(format!("bad seed {raw:?}")))?,
        None => 7,
    };
    flags.finish()?;

    let params = ModelParams::load(Path::new(&checkpoint))?;
    let (source, target_train, _) = load_dataset_dir(&data)?;
    let dir = make_run_dir(&out, seed, None)?;

    let source_centers = analysis::class_centers(&params, &source)?;
    let target_centers = analysis::class_centers(&params, &target_train)?;
    write_centers_csv(&dir.join("centers_source.csv"), &source_centers)?;
    write_centers_csv(&dir.join("centers_target.csv"), &target_centers)?;
    let distance = analysis::inter_domain_distance(&source_centers, &target_centers)?;
    write_kv_csv(&dir.join("distance.csv"), &[("inter_domain_distance", distance)])?;

    for (domain_name, set) in [("source", &source), ("target", &target_train)] {
        let grouped = features_by_class(&params, set)?;
        for (class, rows) in grouped.iter().enumerate() {
            if rows.len() < 2 {
                eprintln!("skipping {domain_name} class {class}: fewer than two samples");
                continue;
            }
            let hist = analysis::jl_histogram(rows, projection_dim, bins, seed)?;
            let mut w = String::from("bin_start,bin_end,count\n");
            for (i, &count) in hist.counts.iter().enumerate() {
                w.push_str(&format!(
                    "{},{},{}\n",
                    i as f64 * hist.bin_width,
                    (i + 1) as f64 * hist.bin_width,
                    count
                ));
            }
            std::fs::write(dir.join(format!("hist_{domain_name}_{class}.csv")), w)?;
        }
    }
    eprintln!(
        "distance {distance:.6}; analysis tables in {}",
        dir.display()
    );
    Ok(())
}

/// Bottleneck features grouped per class (true labels on the source side,
/// predictions on the target side).
fn features_by_class(params: &ModelParams, set: &Dataset) -> Result<Vec<Vec<Vec<f64>>>> {
    let k = params.dims.class_count;
    let dim = params.dims.bottleneck_dim;
    let mut grouped = vec![Vec::new(); k];
    for batch in crate::data::ordered_batches(set, 64) {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let rec = forward(&mut tape, &vars, &batch.xs, None)?;
        let feats = tape.data(rec.bottleneck_features);
        let classes: Vec<usize> = if set.domain == Domain::Target {
            predict(&tape.detach(rec.logits))
        } else {
            batch
                .labels
                .clone()
                .ok_or_else(|| Error::validation("labeled set required"))?
        };
        for (row, &class) in classes.iter().enumerate() {
            if class < k {
                grouped[class].push(feats[row * dim..(row + 1) * dim].to_vec());
            }
        }
    }
    Ok(grouped)
}

fn write_centers_csv(path: &Path, centers: &analysis::CenterSet) -> Result<()> {
    let mut w = String::from("class");
    for d in 0..centers.dim {
        w.push_str(&format!(",c{d}"));
    }
    w.push('\n');
    for (class, center) in centers.centers.iter().enumerate() {
        if let Some(center) = center {
            w.push_str(&class.to_string());
            for v in center {
                w.push_str(&format!(",{v}"));
            }
            w.push('\n');
        }
    }
    std::fs::write(path, w)?;
    Ok(())
}

fn write_kv_csv(path: &Path, pairs: &[(&str, f64)]) -> Result<()> {
    let mut w = String::from("metric,value\n");
    for (k, v) in pairs {
        w.push_str(&format!("{k},{v}\n"));
    }
    std::fs::write(path, w)?;
    Ok(())
}

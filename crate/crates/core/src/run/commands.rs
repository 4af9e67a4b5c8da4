use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{line_chart, require, Layout, RunConfig, Series};
use crate::calib::{study, CalibSet, CalibrationStudy};
use crate::cam::{explain as explain_map, CamMethod, CamOptions};
use crate::data::{generate_synth, read_dataset, to_batch, write_dataset, FoldPlan, LabeledImage, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic_str;
use crate::model::{load_checkpoint, save_checkpoint, ResidualNet};
use crate::prune::{iterate, FoldModel, PruneMasks, StepReport};
use crate::road::road_combined;
use crate::train::{cross_validate, evaluate, mean_std, EpochLog, Example};

/// Paths written by a command, in write order.
pub type Written = Vec<PathBuf>;

fn checked(cfg: &RunConfig) -> Result<RunConfig> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(b)
}

fn f(x: f64) -> String {
    format!("{x:.6}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>], out: &mut Written) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    crate::fsutil::write_atomic(path, &bytes)?;
    out.push(path.to_path_buf());
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S, out: &mut Written) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic_str(path, &text)?;
    out.push(path.to_path_buf());
    Ok(())
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    require(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Training images and the external calibration images.
fn load_images(cfg: &RunConfig, lay: &Layout) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let mut cv = Vec::new();
    let mut external = Vec::new();
    for (img, split) in read_dataset(lay.data_dir())? {
        if img.size != cfg.net.input_size {
            return Err(Error::Config(format!(
                "net.input_size is {} but image {} is {}x{}",
                cfg.net.input_size, img.id, img.size, img.size
            )));
        }
        if split == "external" {
            external.push(img);
        } else {
            cv.push(img);
        }
    }
    Ok((cv, external))
}

fn examples(images: &[LabeledImage]) -> Result<Vec<Example>> {
    images.iter().map(Example::from_image).collect()
}

fn write_epoch_log(path: &Path, log: &[EpochLog], out: &mut Written) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|e| vec![e.fold.to_string(), e.epoch.to_string(), f(e.train_loss), f(e.val_acc)])
        .collect();
    write_csv(path, &["fold", "epoch", "train_loss", "val_acc"], &rows, out)
}

/// Writes the synthetic training set (split `cv`) and the external set
/// (split `external`, ids prefixed `ext_`) to the data directory.
pub fn synth_data(cfg: &RunConfig) -> Result<Written> {
    let cfg = checked(cfg)?;
    let lay = Layout::new(&cfg);
    let mut images = generate_synth(&cfg.data.synth)?;
    let mut splits = vec!["cv".to_string(); images.len()];
    if cfg.data.external_per_class.iter().any(|&n| n > 0) {
        let spec = crate::data::SynthSpec {
            samples_per_class: cfg.data.external_per_class,
            seed: cfg.seed.wrapping_add(1),
            ..cfg.data.synth.clone()
        };
        for mut img in generate_synth(&spec)? {
            img.id = format!("ext_{}", img.id);
            images.push(img);
            splits.push("external".to_string());
        }
    }
    write_dataset(lay.data_dir(), &images, Some(&splits))?;
    log::info!("wrote {} images to {}", images.len(), lay.data_dir().display());
    Ok(vec![lay.data_dir().join("manifest.csv")])
}

/// Stratified k-fold training; step 0 of the pruning table.
pub fn train(cfg: &RunConfig) -> Result<Written> {
    let cfg = checked(cfg)?;
    let lay = Layout::new(&cfg);
    let (images, _) = load_images(&cfg, &lay)?;
    let examples = examples(&images)?;
    let cv = cross_validate(&examples, cfg.cv.folds, &cfg.net, &cfg.train)?;
    let mut out = Vec::new();
    write_json(&lay.fold_plan(), &cv.plan, &mut out)?;
    for fold in &cv.folds {
        let f = fold.result.fold;
        save_checkpoint(&lay.fold_checkpoint(f), &fold.net, &PruneMasks::all_active(&fold.net))?;
        out.push(lay.fold_checkpoint(f));
        write_epoch_log(&lay.epoch_log(0, f), &fold.log, &mut out)?;
    }
    let models = FoldModel::from_cv(&cv);
    let report = StepReport::of(0, &models, Vec::new());
    let best = &models[report.best_fold];
    save_checkpoint(&lay.step_checkpoint(0), &best.net, &best.masks)?;
    out.push(lay.step_checkpoint(0));
    write_json(&lay.step_report(0), &report, &mut out)?;
    log::info!("step 0: mean acc {:.4} +- {:.4}, best {:.4}", report.mean_acc, report.std_acc, report.best_acc);
    Ok(out)
}

/// Iterative prune and fine-tune over every fold model from `train`.
pub fn prune(cfg: &RunConfig) -> Result<Written> {
    let cfg = checked(cfg)?;
    let lay = Layout::new(&cfg);
    let plan: FoldPlan = read_json(&lay.fold_plan())?;
    require(&lay.step_report(0))?;
    let (images, _) = load_images(&cfg, &lay)?;
    if plan.assignments.len() != images.len() {
        return Err(Error::Invalid(format!(
            "{} assigns {} images but the dataset has {}",
            lay.fold_plan().display(),
            plan.assignments.len(),
            images.len()
        )));
    }
    let examples = examples(&images)?;
    let mut models = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let path = lay.fold_checkpoint(fold);
        require(&path)?;
        let (net, masks) = load_checkpoint::<f32>(&path)?;
        let val: Vec<&Example> = plan.val_indices(fold).into_iter().map(|i| &examples[i]).collect();
        let (val_acc, confusion) = evaluate(&net, &val)?;
        models.push(FoldModel {
            fold,
            net,
            masks,
            val_acc,
            confusion,
        });
    }
    let mut out = Vec::new();
    iterate(models, 0, &examples, &plan, &cfg.prune, |report, models, logs| {
        if report.step == 0 {
            return Ok(());
        }
        for (m, log) in models.iter().zip(logs) {
            write_epoch_log(&lay.epoch_log(report.step, m.fold), log, &mut out)?;
        }
        let best = models
            .iter()
            .find(|m| m.fold == report.best_fold)
            .expect("best fold is one of the models");
        save_checkpoint(&lay.step_checkpoint(report.step), &best.net, &best.masks)?;
        out.push(lay.step_checkpoint(report.step));
        write_json(&lay.step_report(report.step), report, &mut out)
    })?;
    Ok(out)
}

/// Indices of up to `per_class` images per class, class-major, chosen by a
/// seeded shuffle.
pub fn sample_per_class(images: &[LabeledImage], per_class: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::new();
    for class in 0..NUM_CLASSES {
        let mut idx: Vec<usize> = (0..images.len()).filter(|&i| images[i].label == class).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, class as u64, 7)));
        idx.truncate(per_class);
        idx.sort_unstable();
        out.extend(idx);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub method: String,
    pub target_class: usize,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMaps {
    pub id: String,
    pub label: usize,
    pub maps: Vec<MapRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapsFile {
    pub step: usize,
    pub size: usize,
    pub images: Vec<ImageMaps>,
}

fn load_step_net(lay: &Layout, step: usize) -> Result<ResidualNet<f32>> {
    let path = lay.step_checkpoint(step);
    require(&path)?;
    Ok(load_checkpoint::<f32>(&path)?.0)
}

/// Attribution maps for the sampled images with every configured method.
pub fn explain(cfg: &RunConfig) -> Result<Written> {
    let cfg = checked(cfg)?;
    let lay = Layout::new(&cfg);
    let methods = cfg.road.methods()?;
    let (images, _) = load_images(&cfg, &lay)?;
    let subset = sample_per_class(&images, cfg.road.per_class, cfg.seed);
    let mut out = Vec::new();
    for &step in &cfg.road.steps {
        let net = load_step_net(&lay, step)?;
        let mut entries = Vec::with_capacity(subset.len());
        for &i in &subset {
            let ex = Example::from_image(&images[i])?;
            let mut maps = Vec::with_capacity(methods.len());
            for &m in &methods {
                let opts = CamOptions {
                    target: cfg.road.target.clone(),
                    class: None,
                    seed: mix(cfg.seed, i as u64, 1),
                };
                let map = explain_map(&net, &ex.pixels, m, &opts)?;
                maps.push(MapRecord {
                    method: m.name().to_string(),
                    target_class: map.target_class,
                    values: map.values.iter().map(|&v| v as f32).collect(),
                });
            }
            entries.push(ImageMaps {
                id: ex.id,
                label: ex.label,
                maps,
            });
        }
        let file = MapsFile {
            step,
            size: cfg.net.input_size,
            images: entries,
        };
        write_json(&lay.maps(step), &file, &mut out)?;
    }
    Ok(out)
}

/// ROAD combined scores for every stored map, plus per-class means.
pub fn road_eval(cfg: &RunConfig) -> Result<Written> {
    let cfg = checked(cfg)?;
    let lay = Layout::new(&cfg);
    let rc = cfg.road.road_config(cfg.seed);
    let (images, _) = load_images(&cfg, &lay)?;
    let by_id: HashMap<&str, &LabeledImage> = images.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut header = vec!["image_id", "class", "method", "step", "target_class", "base", "combined"];
    let theta_cols: Vec<String> = ["morf", "lerf"]
        .iter()
        .flat_map(|s| rc.thresholds.iter().map(move |t| format!("{s}_{t}")))
        .collect();
    header.extend(theta_cols.iter().map(String::as_str));
    let mut rows = Vec::new();
    let mut per_class = Vec::new();
    for &step in &cfg.road.steps {
        let maps: MapsFile = read_json(&lay.maps(step))?;
        let net = load_step_net(&lay, step)?;
        let mut breakdown: Vec<(usize, String, f64)> = Vec::new();
        for (n, entry) in maps.images.iter().enumerate() {
            let img = by_id
                .get(entry.id.as_str())
                .ok_or_else(|| Error::Invalid(format!("mapped image {} is not in the dataset", entry.id)))?;
            let ex = Example::from_image(img)?;
            for (k, rec) in entry.maps.iter().enumerate() {
                let map: Vec<f64> = rec.values.iter().map(|&v| v as f64).collect();
                let seed = mix(cfg.seed, (step * 100_000 + n) as u64, k as u64);
                let s = road_combined(&net, &ex.pixels, &ex.mask, &map, &rc, seed)?;
                let mut row = vec![
                    entry.id.clone(),
                    CLASS_NAMES[entry.label].to_string(),
                    rec.method.clone(),
                    step.to_string(),
                    s.class.to_string(),
                    f(s.base),
                    f(s.combined),
                ];
                row.extend(s.morf.iter().chain(&s.lerf).map(|&v| f(v)));
                rows.push(row);
                breakdown.push((entry.label, rec.method.clone(), s.combined));
            }
        }
        let counts = breakdown.iter().fold(BTreeMap::new(), |mut m, (c, meth, _)| {
            *m.entry((*c, meth.clone())).or_insert(0usize) += 1;
            m
        });
        for (class, methods) in crate::road::category_breakdown(&breakdown) {
            for (method, mean) in methods {
                let n = counts[&(class, method.clone())];
                per_class.push(vec![step.to_string(), CLASS_NAMES[class].to_string(), method, f(mean), n.to_string()]);
            }
        }
    }
    let mut out = Vec::new();
    write_csv(&lay.road_scores(), &header, &rows, &mut out)?;
    write_csv(
        &lay.road_per_class(),
        &["step", "class", "method", "mean_combined", "count"],
        &per_class,
        &mut out,
    )?;
    Ok(out)
}

/// Fits the configured head on repeated splits of the external set.
pub fn calibrate(cfg: &RunConfig) -> Result<Written> {
    let cfg = checked(cfg)?;
    let lay = Layout::new(&cfg);
    let net = load_step_net(&lay, cfg.calibration.step)?;
    let (_, external) = load_images(&cfg, &lay)?;
    if external.is_empty() {
        return Err(Error::Invalid(format!(
            "{} has no images with split `external`",
            lay.data_dir().join("manifest.csv").display()
        )));
    }
    let set = calib_set(&net, &external)?;
    let st = study(&set, &cfg.calibration.calib_config(), cfg.seed)?;
    write_calibration(&lay, &st)
}

/// Logits and penultimate features of `images` under `net`.
pub fn calib_set(net: &ResidualNet<f32>, images: &[LabeledImage]) -> Result<CalibSet> {
    let examples = examples(images)?;
    let size = net.config().input_size;
    let (mut logits, mut features) = (Vec::new(), Vec::new());
    for chunk in examples.chunks(64) {
        let px: Vec<&[f32]> = chunk.iter().map(|e| e.pixels.as_slice()).collect();
        let (z, phi) = net.logits_and_features(&to_batch(&px, size)?)?;
        let (k, d) = (z.shape()[1], phi.shape()[1]);
        logits.extend(z.data().chunks(k).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()));
        features.extend(phi.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()));
    }
    CalibSet::new(logits, features, examples.iter().map(|e| e.label).collect())
}

fn write_calibration(lay: &Layout, st: &CalibrationStudy) -> Result<Written> {
    let mut out = Vec::new();
    let summary: Vec<Vec<String>> = st
        .summary
        .iter()
        .map(|m| {
            vec![
                st.head.name().to_string(),
                m.metric.clone(),
                f(m.pre_mean),
                f(m.pre_std),
                f(m.post_mean),
                f(m.post_std),
            ]
        })
        .collect();
    write_csv(
        &lay.calibration("summary.csv"),
        &["head", "metric", "pre_mean", "pre_std", "post_mean", "post_std"],
        &summary,
        &mut out,
    )?;
    let mut repeats = Vec::new();
    let mut bins = Vec::new();
    let mut confusion = Vec::new();
    for r in &st.reports {
        repeats.push(vec![
            r.repeat.to_string(),
            r.val_size.to_string(),
            r.test_size.to_string(),
            f(r.pre.accuracy),
            f(r.post.accuracy),
            f(r.pre.nll),
            f(r.post.nll),
            f(r.pre.ece),
            f(r.post.ece),
        ]);
        for (phase, m) in [("pre", &r.pre), ("post", &r.post)] {
            for (b, bin) in m.bins.iter().enumerate() {
                bins.push(vec![
                    r.repeat.to_string(),
                    phase.to_string(),
                    b.to_string(),
                    f(bin.lo),
                    f(bin.hi),
                    bin.count.to_string(),
                    f(bin.mean_confidence),
                    f(bin.accuracy),
                ]);
            }
            for (t, row) in m.confusion.iter().enumerate() {
                for (p, &n) in row.iter().enumerate() {
                    confusion.push(vec![
                        r.repeat.to_string(),
                        phase.to_string(),
                        CLASS_NAMES[t].to_string(),
                        CLASS_NAMES[p].to_string(),
                        n.to_string(),
                    ]);
                }
            }
        }
    }
    write_csv(
        &lay.calibration("repeats.csv"),
        &["repeat", "val_size", "test_size", "pre_acc", "post_acc", "pre_nll", "post_nll", "pre_ece", "post_ece"],
        &repeats,
        &mut out,
    )?;
    write_csv(
        &lay.calibration("reliability.csv"),
        &["repeat", "phase", "bin", "lo", "hi", "count", "mean_confidence", "accuracy"],
        &bins,
        &mut out,
    )?;
    write_csv(
        &lay.calibration("confusion.csv"),
        &["repeat", "phase", "true_class", "predicted_class", "count"],
        &confusion,
        &mut out,
    )?;
    let heads: Vec<_> = st.reports.iter().map(|r| &r.head).collect();
    write_json(&lay.calibration("heads.json"), &heads, &mut out)?;
    Ok(out)
}

/// Reads `road/scores.csv` into `(step, method) -> combined scores`.
fn read_road_scores(path: &Path) -> Result<BTreeMap<(usize, String), Vec<f64>>> {
    let csv_err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rd.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Invalid(format!("{}: no `{name}` column", path.display())))
    };
    let (cs, cm, cc) = (col("step")?, col("method")?, col("combined")?);
    let mut out: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let parse_err = |what: &str| Error::Invalid(format!("{}: bad {what} in {:?}", path.display(), rec));
        let step: usize = rec[cs].parse().map_err(|_| parse_err("step"))?;
        let v: f64 = rec[cc].parse().map_err(|_| parse_err("combined"))?;
        out.entry((step, rec[cm].to_string())).or_default().push(v);
    }
    Ok(out)
}

/// Summary CSVs and charts from the step reports, plus ROAD means per step
/// when ROAD scores exist.
pub fn report(cfg: &RunConfig) -> Result<Written> {
    let cfg = checked(cfg)?;
    let lay = Layout::new(&cfg);
    let mut steps: Vec<StepReport> = vec![read_json(&lay.step_report(0))?];
    while lay.step_report(steps.len()).exists() {
        steps.push(read_json(&lay.step_report(steps.len()))?);
    }
    let mut out = Vec::new();
    let table: Vec<Vec<String>> = steps
        .iter()
        .map(|s| {
            vec![
                s.step.to_string(),
                f(s.mean_acc),
                f(s.std_acc),
                f(s.best_acc),
                s.best_fold.to_string(),
                f(100.0 * s.overall_sparsity),
            ]
        })
        .collect();
    write_csv(
        &lay.report("table1.csv"),
        &["step", "mean_acc", "std_acc", "best_acc", "best_fold", "overall_sparsity_pct"],
        &table,
        &mut out,
    )?;
    let folds: Vec<Vec<String>> = steps
        .iter()
        .flat_map(|s| s.fold_accs.iter().enumerate().map(move |(k, a)| vec![s.step.to_string(), k.to_string(), f(*a)]))
        .collect();
    write_csv(&lay.report("fold_accuracy.csv"), &["step", "fold", "val_acc"], &folds, &mut out)?;
    let layers: Vec<Vec<String>> = steps
        .iter()
        .flat_map(|s| {
            s.per_layer_sparsity
                .iter()
                .map(move |(l, v)| vec![s.step.to_string(), l.clone(), f(100.0 * v)])
        })
        .collect();
    write_csv(&lay.report("layer_sparsity.csv"), &["step", "layer", "sparsity_pct"], &layers, &mut out)?;

    let xs = |s: &StepReport| s.step as f64;
    let acc_chart = line_chart(
        "Validation accuracy per pruning step",
        "pruning step",
        "accuracy",
        &[
            Series {
                name: "mean (+- std)".into(),
                points: steps.iter().map(|s| (xs(s), s.mean_acc)).collect(),
                err: Some(steps.iter().map(|s| s.std_acc).collect()),
            },
            Series {
                name: "best fold".into(),
                points: steps.iter().map(|s| (xs(s), s.best_acc)).collect(),
                err: None,
            },
        ],
    );
    write_text(&lay.report("accuracy.svg"), &acc_chart, &mut out)?;
    let mut sparsity_series = vec![Series {
        name: "overall".into(),
        points: steps.iter().map(|s| (xs(s), 100.0 * s.overall_sparsity)).collect(),
        err: None,
    }];
    let layer_names: Vec<String> = steps[0].per_layer_sparsity.keys().cloned().collect();
    for name in layer_names {
        sparsity_series.push(Series {
            points: steps
                .iter()
                .map(|s| (xs(s), 100.0 * s.per_layer_sparsity.get(&name).copied().unwrap_or(0.0)))
                .collect(),
            name,
            err: None,
        });
    }
    write_text(
        &lay.report("sparsity.svg"),
        &line_chart("Sparsity per pruning step", "pruning step", "sparsity (%)", &sparsity_series),
        &mut out,
    )?;

    if lay.road_scores().exists() {
        let scores = read_road_scores(&lay.road_scores())?;
        let mut rows = Vec::new();
        let mut per_method: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for ((step, method), vals) in &scores {
            let (m, s) = mean_std(vals);
            rows.push(vec![step.to_string(), method.clone(), f(m), f(s), vals.len().to_string()]);
            per_method.entry(method.clone()).or_default().push((*step as f64, m));
        }
        write_csv(&lay.report("road_means.csv"), &["step", "method", "mean_combined", "std_combined", "count"], &rows, &mut out)?;
        let series: Vec<Series> = CamMethod::ALL
            .iter()
            .filter_map(|m| {
                per_method.get(m.name()).map(|pts| Series {
                    name: m.name().to_string(),
                    points: pts.clone(),
                    err: None,
                })
            })
            .collect();
        write_text(
            &lay.report("road.svg"),
            &line_chart("ROAD combined score per pruning step", "pruning step", "mean combined score", &series),
            &mut out,
        )?;
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str, out: &mut Written) -> Result<()> {
    write_atomic_str(path, text)?;
    out.push(path.to_path_buf());
    Ok(())
}

/// Every stage in order; `synth-data` only when no dataset path is set.
pub fn run_all(cfg: &RunConfig) -> Result<Written> {
    let mut out = Vec::new();
    if cfg.data.path.is_none() {
        out.extend(synth_data(cfg)?);
    }
    out.extend(train(cfg)?);
    out.extend(prune(cfg)?);
    out.extend(explain(cfg)?);
    out.extend(road_eval(cfg)?);
    out.extend(calibrate(cfg)?);
    out.extend(report(cfg)?);
    Ok(out)
}

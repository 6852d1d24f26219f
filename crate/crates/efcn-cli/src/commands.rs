//! Subcommand implementations.
//!
//! Every command is a thin orchestration layer: parse/validate inputs,
//! call into the library, write the declared artifacts. All real logic
//! (and its tests) lives in the library crate.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use efcn::belief::PignisticDist;
use efcn::data::{gen_synthetic, SegDataset};
use efcn::frame::PixelLabel;
use efcn::io::{load_checkpoint, save_checkpoint, save_mask, save_ppm, save_tensor};
use efcn::metrics::{
    calibration, label_universe, novelty_stats, pixel_utility, summary_csv, uiou, SegResult,
};
use efcn::model::Model;
use efcn::tensor::Tensor;
use efcn::training::{grad_check, history_csv, train};
use efcn::utility::{select_act, UtilityTable};
use efcn::viz::render_overlay;
use efcn::{ActList, ClassSet, Error, Frame, Result};

use crate::config::{build_act_list, RunConfig};

/// Resolves a path from a command-line override or the config file.
fn resolve(
    cli: Option<PathBuf>,
    cfg: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf> {
    cli.or_else(|| cfg.clone()).ok_or_else(|| {
        Error::Config(format!(
            "no {what} given (pass --{what} or set paths.{} in the config)",
            what.replace('-', "_")
        ))
    })
}

fn load_dataset(dir: &Path) -> Result<SegDataset> {
    SegDataset::load(dir)
}

/// The split's sample indices by name.
fn split_indices<'d>(dataset: &'d SegDataset, split: &str) -> Result<&'d [usize]> {
    match split {
        "train" => Ok(&dataset.train),
        "val" => Ok(&dataset.val),
        "test" => Ok(&dataset.test),
        other => Err(Error::Config(format!(
            "unknown split {other:?} (expected train, val or test)"
        ))),
    }
}

/// Checks that a checkpointed model speaks the dataset's frame.
fn check_frames(model: &Model, dataset: &SegDataset) -> Result<()> {
    if model.frame() != &dataset.frame {
        return Err(Error::Config(format!(
            "checkpoint frame {:?} does not match dataset frame {:?}",
            model.frame().names(),
            dataset.frame.names()
        )));
    }
    Ok(())
}

/// Generates a synthetic dataset and writes it to disk.
pub fn cmd_synth(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let frame = cfg.frame()?;
    let dir = resolve(out, &cfg.paths.dataset, "out")?;
    let dataset = gen_synthetic(&frame, &cfg.synth_config())?;
    dataset.save(&dir)?;
    println!(
        "synth: wrote {} samples ({} train / {} val / {} test) to {}",
        dataset.samples.len(),
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        dir.display()
    );
    Ok(())
}

/// Trains a model on a dataset's train split and writes checkpoint + history.
pub fn cmd_train(
    cfg: &RunConfig,
    dataset_dir: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    history: Option<PathBuf>,
) -> Result<()> {
    let dataset_dir = resolve(dataset_dir, &cfg.paths.dataset, "dataset")?;
    let checkpoint_path = resolve(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let dataset = load_dataset(&dataset_dir)?;
    let frame = cfg.frame()?;
    if frame != dataset.frame {
        return Err(Error::Config(format!(
            "config frame {:?} does not match dataset frame {:?}",
            frame.names(),
            dataset.frame.names()
        )));
    }
    let channels = dataset.samples.first().map(|s| s.image.dims()[2]);
    if channels != Some(cfg.model.in_channels) {
        return Err(Error::Config(format!(
            "model.in_channels = {} but dataset images have {:?} channels",
            cfg.model.in_channels, channels
        )));
    }

    let acts = cfg.act_list(&frame)?;
    let table = UtilityTable::identity(&frame, acts, cfg.decision.gamma)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(
        frame,
        &cfg.arch()?,
        cfg.model.in_channels,
        cfg.model.prototypes,
        &mut rng,
    )?;
    let stats = train(&mut model, &dataset, &table, &cfg.train_config()?)?;
    save_checkpoint(&checkpoint_path, &model)?;
    if let Some(history_path) = history.or_else(|| cfg.paths.history.clone()) {
        std::fs::write(&history_path, history_csv(&stats))?;
    }
    let last = stats.last().expect("training ran at least one epoch");
    println!(
        "train: {} epochs, final loss {:.6}, train pixel utility {:.4}; checkpoint {}",
        stats.len(),
        last.loss,
        last.pu,
        checkpoint_path.display()
    );
    Ok(())
}

/// Per-image artifacts of a prediction pass over one split.
pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    dataset_dir: Option<PathBuf>,
    split: &str,
    out: Option<PathBuf>,
) -> Result<()> {
    let checkpoint_path = resolve(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let dataset_dir = resolve(dataset_dir, &cfg.paths.dataset, "dataset")?;
    let out_dir = resolve(out, &cfg.paths.out_dir, "out")?;
    let model = load_checkpoint(&checkpoint_path)?;
    let dataset = load_dataset(&dataset_dir)?;
    check_frames(&model, &dataset)?;
    let acts = cfg.act_list(model.frame())?;
    let table = UtilityTable::identity(model.frame(), acts, cfg.decision.gamma)?;
    std::fs::create_dir_all(&out_dir)?;

    let indices = split_indices(&dataset, split)?;
    let m = model.frame().class_count();
    for &i in indices {
        let sample = &dataset.samples[i];
        let pred = model.predict(&sample.image, &table)?;
        let (h, w, _) = pred.betp.dims3()?;
        let assigned_labels: Vec<PixelLabel> =
            pred.assigned.iter().map(|&s| PixelLabel::Known(s)).collect();
        save_mask(
            out_dir.join(format!("pred_{i:05}.efmk")),
            &assigned_labels,
            h,
            w,
            m,
        )?;
        save_tensor(out_dir.join(format!("betp_{i:05}.eftn")), &pred.betp)?;
        let result = SegResult::from_prediction(pred, sample.labels.clone())?;
        let (rgb, h, w) = render_overlay(&result, model.frame())?;
        save_ppm(out_dir.join(format!("overlay_{i:05}.ppm")), &rgb, h, w)?;
    }
    println!(
        "predict: wrote masks, BetP tensors and overlays for {} images to {}",
        indices.len(),
        out_dir.display()
    );
    Ok(())
}

/// One split's predictions flattened into a single scored result.
fn collect_result(
    model: &Model,
    dataset: &SegDataset,
    table: &UtilityTable,
    indices: &[usize],
) -> Result<SegResult> {
    let m = model.frame().class_count();
    let mut assigned = Vec::new();
    let mut labels = Vec::new();
    let mut probs = Vec::new();
    for &i in indices {
        let sample = &dataset.samples[i];
        let pred = model.predict(&sample.image, table)?;
        assigned.extend_from_slice(&pred.assigned);
        labels.extend_from_slice(&sample.labels);
        probs.extend_from_slice(pred.betp.data());
    }
    let pixels = assigned.len();
    SegResult::new(
        assigned,
        Tensor::from_vec(&[1, pixels, m], probs)?,
        labels,
    )
}

/// Re-decides every pixel of a result from its stored BetP under a new
/// utility table (decision-making is independent of the forward pass).
fn redecide(result: &SegResult, table: &UtilityTable) -> Result<SegResult> {
    let m = table.class_count();
    let mut assigned = Vec::with_capacity(result.labels.len());
    for px in 0..result.labels.len() {
        let dist =
            PignisticDist::from_probs(result.betp.data()[px * m..(px + 1) * m].to_vec());
        let eu = table.expected_utilities(&dist)?;
        let (_, act) = select_act(&eu, table.acts())?;
        assigned.push(act);
    }
    SegResult::new(assigned, result.betp.clone(), result.labels.clone())
}

fn metrics_over(result: &SegResult, table: &UtilityTable, bins: usize) -> Result<(f64, f64, f64)> {
    let pu = pixel_utility(result, table)?;
    let universe = label_universe(result);
    let ui = uiou(result, table, &universe)?;
    let ece = calibration(result, table, bins)?.ece;
    Ok((pu, ui, ece))
}

/// Evaluates a checkpoint on a split; optionally sweeps γ from one BetP set.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    dataset_dir: Option<PathBuf>,
    split: &str,
    gamma_sweep: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let checkpoint_path = resolve(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let dataset_dir = resolve(dataset_dir, &cfg.paths.dataset, "dataset")?;
    let model = load_checkpoint(&checkpoint_path)?;
    let dataset = load_dataset(&dataset_dir)?;
    check_frames(&model, &dataset)?;
    let frame = model.frame().clone();
    let acts = cfg.act_list(&frame)?;
    let indices = split_indices(&dataset, split)?;
    if indices.is_empty() {
        return Err(Error::Config(format!("split {split:?} is empty")));
    }

    let table = UtilityTable::identity(&frame, acts.clone(), cfg.decision.gamma)?;
    let result = collect_result(&model, &dataset, &table, indices)?;

    let csv = if gamma_sweep {
        // Decisions are a pure function of BetP and γ, so the sweep reuses
        // the stored probabilities and only re-runs act selection.
        let mut csv = String::from("gamma,pu,uiou,ece\n");
        for step in 0..=10u32 {
            let gamma = f64::from(50 + 5 * step) / 100.0;
            let sweep_table = UtilityTable::identity(&frame, acts.clone(), gamma)?;
            let decided = redecide(&result, &sweep_table)?;
            let (pu, ui, ece) = metrics_over(&decided, &sweep_table, cfg.metrics.bins)?;
            csv.push_str(&format!("{gamma},{pu},{ui},{ece}\n"));
        }
        csv
    } else {
        let (pu, ui, ece) = metrics_over(&result, &table, cfg.metrics.bins)?;
        println!("evaluate: split {split}, pu {pu:.4}, uiou {ui:.4}, ece {ece:.4}");
        let report = calibration(&result, &table, cfg.metrics.bins)?;
        summary_csv(pu, ui, &report)
    };

    let novelty = novelty_stats(&result, &frame)?;
    if novelty.unknown_pixels > 0 {
        println!(
            "evaluate: novel pixels {} (omega rate {:.4}), known pixels {} (omega rate {:.4})",
            novelty.unknown_pixels,
            novelty.unknown_omega_rate,
            novelty.known_pixels,
            novelty.known_omega_rate
        );
    }

    let default_name = if gamma_sweep { "gamma_sweep.csv" } else { "metrics.csv" };
    let out_path = match out {
        Some(p) => p,
        None => resolve(None, &cfg.paths.out_dir, "out")?.join(default_name),
    };
    if let Some(dir) = out_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&out_path, csv)?;
    println!("evaluate: wrote {}", out_path.display());
    Ok(())
}

/// Writes reliability-diagram data for a checkpoint on a split.
pub fn cmd_calibrate(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    dataset_dir: Option<PathBuf>,
    split: &str,
    out: Option<PathBuf>,
) -> Result<()> {
    let checkpoint_path = resolve(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let dataset_dir = resolve(dataset_dir, &cfg.paths.dataset, "dataset")?;
    let model = load_checkpoint(&checkpoint_path)?;
    let dataset = load_dataset(&dataset_dir)?;
    check_frames(&model, &dataset)?;
    let acts = cfg.act_list(model.frame())?;
    let table = UtilityTable::identity(model.frame(), acts, cfg.decision.gamma)?;
    let indices = split_indices(&dataset, split)?;
    let result = collect_result(&model, &dataset, &table, indices)?;
    let report = calibration(&result, &table, cfg.metrics.bins)?;
    println!("calibrate: split {split}, {} bins, ece {:.4}", report.bins, report.ece);

    let out_path = match out {
        Some(p) => p,
        None => resolve(None, &cfg.paths.out_dir, "out")?.join("reliability.csv"),
    };
    if let Some(dir) = out_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&out_path, report.csv())?;
    println!("calibrate: wrote {}", out_path.display());
    Ok(())
}

/// Expands a category spec into concrete label sets for table columns.
fn soft_label_columns(frame: &Frame, spec: &str) -> Result<Vec<ClassSet>> {
    let m = frame.class_count();
    let mut cols = Vec::new();
    for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match token {
            "singletons" => cols.extend((0..m).map(ClassSet::singleton)),
            "pairs" => {
                for a in 0..m {
                    for b in a + 1..m {
                        cols.push(ClassSet::from_indices(&[a, b]));
                    }
                }
            }
            "triples" => {
                for a in 0..m {
                    for b in a + 1..m {
                        for c in b + 1..m {
                            cols.push(ClassSet::from_indices(&[a, b, c]));
                        }
                    }
                }
            }
            "omega" => cols.push(frame.omega()),
            other => {
                return Err(Error::Config(format!(
                    "unknown label category {other:?} (expected singletons, pairs, triples, omega)"
                )))
            }
        }
    }
    let mut seen = Vec::new();
    cols.retain(|c| {
        let fresh = !seen.contains(c);
        seen.push(*c);
        fresh
    });
    Ok(cols)
}

/// Prints utility tables as CSV: the OWA-extended matrix (per true class),
/// or — with `--soft-labels` — the normalized soft-label matrix.
pub fn cmd_owa(gamma: f64, m: usize, acts_spec: &str, soft_labels: Option<&str>) -> Result<()> {
    if m < 2 {
        return Err(Error::Config(format!("need at least two classes, got {m}")));
    }
    let frame = Frame::new((1..=m).map(|j| format!("w{j}")).collect())?;
    let mut acts = build_act_list(&frame, acts_spec)?;
    let columns = match soft_labels {
        Some(spec) => {
            let cols = soft_label_columns(&frame, spec)?;
            // Labels must be acts: fold the requested columns into the list.
            let mut sets: Vec<ClassSet> = acts.acts().to_vec();
            sets.extend(&cols);
            acts = ActList::build(&frame, &sets)?;
            Some(cols)
        }
        None => None,
    };
    let table = UtilityTable::identity(&frame, acts, gamma)?;

    let mut csv = String::from("act");
    match &columns {
        Some(cols) => {
            for c in cols {
                csv.push_str(&format!(",{}", frame.format_set(*c)));
            }
            csv.push('\n');
            for a in 0..table.acts().len() {
                csv.push_str(&frame.format_set(table.acts().act(a)));
                for c in cols {
                    csv.push_str(&format!(",{:.6}", table.soft(a, table.label_position(*c)?)));
                }
                csv.push('\n');
            }
        }
        None => {
            for name in frame.names() {
                csv.push_str(&format!(",{name}"));
            }
            csv.push('\n');
            for a in 0..table.acts().len() {
                csv.push_str(&frame.format_set(table.acts().act(a)));
                for j in 0..m {
                    csv.push_str(&format!(",{:.6}", table.extended(a, j)));
                }
                csv.push('\n');
            }
        }
    }
    print!("{csv}");
    Ok(())
}

/// Finite-difference validation of the whole gradient graph on a small
/// synthetic sample; exits nonzero when the error exceeds the tolerance.
pub fn cmd_gradcheck(params: usize, seed: u64, tol: f64) -> Result<()> {
    let frame = Frame::new(vec!["bg".to_string(), "fg".to_string()])?;
    let synth = efcn::data::SynthConfig {
        count: 1,
        height: 8,
        width: 8,
        seed,
        boundary_width: 1,
        min_radius: 2,
        max_radius: 3,
        train_fraction: 1.0,
        ..efcn::data::SynthConfig::default()
    };
    let dataset = gen_synthetic(&frame, &synth)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let model = Model::init(
        frame.clone(),
        &efcn::backbone::ArchDesc::micro(),
        3,
        5,
        &mut rng,
    )?;
    let acts = ActList::singletons_and_omega(&frame);
    let table = UtilityTable::identity(&frame, acts, 0.8)?;
    let report = grad_check(&model, &dataset.samples[0], &table, params, seed)?;
    let verdict = if report.max_rel_error < tol { "PASS" } else { "FAIL" };
    println!(
        "gradcheck checked={} max_rel={:.3e} mean_rel={:.3e} worst_param={} jitter_rounds={} tol={tol:.0e}: {verdict}",
        report.checked,
        report.max_rel_error,
        report.mean_rel_error,
        report.worst_param,
        report.jitter_rounds
    );
    if report.max_rel_error >= tol {
        return Err(Error::Numeric {
            what: "gradient check",
            residual: report.max_rel_error,
        });
    }
    Ok(())
}

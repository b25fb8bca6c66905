use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use oxipipe_core::cnn::{self, load_model, save_model, write_loss_csv, CnnModel};
use oxipipe_core::dsp::{WindowedDataset, STREAM_NAMES};
use oxipipe_core::explain::{self, CHANNEL_NAMES};
use oxipipe_core::frameio::{self, fmt_f64};
use oxipipe_core::harness::{self, ExperimentReport, PreparedData, Selection};
use oxipipe_core::plot;
use oxipipe_core::roi::{self, ColorSignal};
use oxipipe_core::synth;

use crate::config::{self, PipelineConfig, SynthConfig};
use crate::error::CliError;
use crate::output::{OutputDir, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Train,
    Eval,
    Explain,
    Gridsearch,
    Compare,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Eval => "eval",
            Mode::Explain => "explain",
            Mode::Gridsearch => "gridsearch",
            Mode::Compare => "compare",
        }
    }
}

pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s.into_bytes()
}

pub fn cmd_synth(c: &Common) -> Result<(), CliError> {
    let started = Instant::now();
    let mut cfg: SynthConfig = config::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let mut out = OutputDir::create(&c.out)?;
    let signal = if cfg.frames {
        let rec = synth::generate_frames(&cfg.profile, &cfg.physio, cfg.fps, &cfg.render, cfg.seed)?;
        out.write("recording.rvf", &frameio::write_rvf(&rec.frames))?;
        let mask: String = rec
            .mask
            .chunks(cfg.render.width as usize)
            .map(|row| row.iter().map(|&m| if m { '1' } else { '0' }).collect::<String>() + "\n")
            .collect();
        out.write("mask.txt", mask.as_bytes())?;
        rec.signal
    } else {
        synth::generate_color_signal(&cfg.profile, &cfg.physio, cfg.fps, cfg.seed)?
    };
    out.write("signal.csv", frameio::write_signal_csv(&signal.to_table()).as_bytes())?;
    let inputs = c.config.iter().map(|p| p.display().to_string()).collect();
    let manifest = RunManifest::new("synth", None, &cfg, inputs, &c.out, cfg.seed, started);
    out.finish(manifest)
}

fn is_ext(p: &Path, ext: &str) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn read_bytes(p: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(p).map_err(|e| CliError::io(p, e))
}

fn read_text(p: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))
}

/// Loads one recording. RVF videos go through skin segmentation; labels
/// and cycle indices then come from `labels` (a signal CSV).
pub fn load_signal(path: &Path, labels: Option<&Path>) -> Result<ColorSignal, CliError> {
    let mut signal = if is_ext(path, "rvf") {
        roi::extract_color_signal(&frameio::read_rvf(&read_bytes(path)?)?)?
    } else if is_ext(path, "csv") {
        ColorSignal::from_table(&frameio::read_signal_csv(&read_text(path)?)?)?
    } else {
        return Err(CliError::ConfigInvalid(format!(
            "{}: expected a .rvf or .csv recording",
            path.display()
        )));
    };
    if let Some(l) = labels {
        let table = frameio::read_signal_csv(&read_text(l)?)?;
        if table.rgb.len() != signal.len() {
            return Err(CliError::ConfigInvalid(format!(
                "{}: {} label rows for {} samples",
                l.display(),
                table.rgb.len(),
                signal.len()
            )));
        }
        signal.spo2 = table.spo2.clone();
        signal.cycle_boundaries = table.cycle_boundaries();
        signal.validate()?;
    }
    Ok(signal)
}

fn load_pair(cfg: &PipelineConfig) -> Result<(ColorSignal, ColorSignal, Vec<String>), CliError> {
    let d = &cfg.data;
    match (&d.train, &d.test) {
        (None, None) => {
            let (tr, te) = d.synthetic.generate(cfg.seed)?;
            Ok((tr, te, Vec::new()))
        }
        (Some(a), Some(b)) => {
            let tr = load_signal(a, d.train_labels.as_deref())?;
            let te = load_signal(b, d.test_labels.as_deref())?;
            let mut inputs = vec![a.display().to_string(), b.display().to_string()];
            inputs.extend(d.train_labels.iter().chain(&d.test_labels).map(|p| p.display().to_string()));
            Ok((tr, te, inputs))
        }
        _ => Err(CliError::ConfigInvalid(
            "data.train and data.test must be given together".into(),
        )),
    }
}

fn predictions_csv(ds: &WindowedDataset, cnn_pred: &[f64], ror_pred: &[f64]) -> String {
    let mut s = String::from("window,start,end,label,cnn,ror\n");
    for (i, w) in ds.windows.iter().enumerate() {
        s.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            w.start,
            w.end,
            w.label.map(fmt_f64).unwrap_or_default(),
            fmt_f64(cnn_pred[i]),
            fmt_f64(ror_pred[i])
        ));
    }
    s
}

fn write_experiment(
    out: &mut OutputDir,
    report: &ExperimentReport,
    model: &CnnModel,
    history: &[cnn::EpochLoss],
    data: &PreparedData,
    test_predictions: &[f64],
    cfg: &PipelineConfig,
) -> Result<(), CliError> {
    let (_, ror_pred) = harness::ror_baseline(&data.train, &data.test, cfg.experiment.reference)?;
    out.write("model.json", save_model(model).as_bytes())?;
    let loss = write_loss_csv(history);
    out.write("loss.csv", loss.as_bytes())?;
    out.write("loss.svg", plot::plot_csv("training loss", &loss)?.as_bytes())?;
    out.write("report.json", report.to_json().as_bytes())?;
    out.write("grid.csv", report.grid_csv().as_bytes())?;
    out.write("calibration.json", &json(&report.calibration))?;
    out.write(
        "predictions.csv",
        predictions_csv(&data.test, test_predictions, &ror_pred).as_bytes(),
    )?;
    Ok(())
}

fn require_model(model: Option<&Path>, mode: Mode) -> Result<CnnModel, CliError> {
    let p = model.ok_or_else(|| CliError::ConfigInvalid(format!("mode {} needs --model", mode.name())))?;
    Ok(load_model(&read_text(p)?)?)
}

pub fn cmd_pipeline(
    c: &Common,
    mode: Mode,
    model_path: Option<&Path>,
    follow_paper_selection: bool,
) -> Result<(), CliError> {
    let started = Instant::now();
    let mut cfg: PipelineConfig = config::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if follow_paper_selection {
        cfg.experiment.selection = Selection::Highest;
    }
    // Fail on a missing model before any expensive work.
    let model = match mode {
        Mode::Eval | Mode::Explain => Some(require_model(model_path, mode)?),
        _ => None,
    };
    let threads = harness::threads_from_env();
    let mut out = OutputDir::create(&c.out)?;
    let mut inputs: Vec<String> = c.config.iter().map(|p| p.display().to_string()).collect();
    inputs.extend(model_path.map(|p| p.display().to_string()));
    if mode == Mode::Compare {
        let seeds: Vec<u64> = (0..cfg.compare.seed_count).map(|k| cfg.seed.wrapping_add(k)).collect();
        let table = harness::compare_conditions(
            &cfg.compare.profiles,
            &cfg.data.synthetic,
            &cfg.experiment,
            &seeds,
            threads,
        )?;
        out.write("conditions.json", &json(&table))?;
        out.write("conditions.csv", table.to_csv().as_bytes())?;
        let bars: Vec<(String, f64)> = cfg
            .compare
            .profiles
            .iter()
            .map(|(label, _)| {
                let rows = table.rows_for(label);
                let mean = rows.iter().map(|r| r.cnn_rmse).sum::<f64>() / rows.len().max(1) as f64;
                (label.clone(), mean)
            })
            .collect();
        out.write(
            "conditions.svg",
            plot::bar_chart(&format!("mean CNN test RMSE by {}", table.factor), &bars).as_bytes(),
        )?;
    } else {
        let (train, test, files) = load_pair(&cfg)?;
        inputs.extend(files);
        match mode {
            Mode::Train => {
                let o = harness::run_experiment(&train, &test, &cfg.experiment, cfg.seed, threads)?;
                write_experiment(&mut out, &o.report, &o.model, &o.history, &o.data, &o.test_predictions, &cfg)?;
            }
            Mode::Gridsearch => {
                let o = harness::grid_search(&cfg.grid, &train, &test, &cfg.experiment, cfg.seed, threads)?;
                write_experiment(&mut out, &o.report, &o.model, &o.history, &o.data, &o.test_predictions, &cfg)?;
            }
            Mode::Eval => {
                let model = model.expect("checked above");
                let e = &cfg.experiment;
                let data = harness::prepare(&train, &test, e.window_s, e.stride_s, &e.dsp)?;
                let pred = cnn::predict_all(&model, &data.test)?;
                let (_, ror_pred) = harness::ror_baseline(&data.train, &data.test, e.reference)?;
                let labels = data.test.labels().expect("prepared data is labeled");
                let m = |p: &[f64]| -> Result<(f64, f64), CliError> {
                    let r = cnn::rmse(p, &labels).map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
                    let a = cnn::mae(p, &labels).map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
                    Ok((r, a))
                };
                let (cnn_rmse, cnn_mae) = m(&pred)?;
                let (ror_rmse, ror_mae) = m(&ror_pred)?;
                let metrics = harness::TestMetrics {
                    windows: data.test.len(),
                    cnn_rmse,
                    cnn_mae,
                    ror_rmse,
                    ror_mae,
                };
                out.write("eval.json", &json(&metrics))?;
                out.write("predictions.csv", predictions_csv(&data.test, &pred, &ror_pred).as_bytes())?;
            }
            Mode::Explain => {
                let model = model.expect("checked above");
                explain_outputs(&mut out, &model, &train, &test, &cfg)?;
            }
            Mode::Compare => unreachable!(),
        }
    }
    let manifest = RunManifest::new("pipeline", Some(mode.name()), &cfg, inputs, &c.out, cfg.seed, started);
    out.finish(manifest)
}

fn explain_outputs(
    out: &mut OutputDir,
    model: &CnnModel,
    train: &ColorSignal,
    test: &ColorSignal,
    cfg: &PipelineConfig,
) -> Result<(), CliError> {
    let e = &cfg.experiment;
    let data = harness::prepare(train, test, e.window_s, e.stride_s, &e.dsp)?;
    let step = cfg.explain.window_step.max(1);
    let picked: Vec<usize> = (0..data.test.len()).step_by(step).collect();
    let subset = data.test.subset(&picked);
    let mut csv = format!("{}\n", explain::RELEVANCE_CSV_HEADER);
    let mut first = None;
    for (&wi, w) in picked.iter().zip(&subset.windows) {
        let map = explain::lrp(model, &w.input, cfg.explain.epsilon)?;
        explain::write_relevance_rows(&mut csv, wi, &map);
        first.get_or_insert(map);
    }
    let weights = explain::channel_weight_profile(model)?;
    let relevance = explain::channel_relevance_report(model, &subset, cfg.explain.epsilon)?;
    out.write("relevance.csv", csv.as_bytes())?;
    out.write("profile.json", explain::profile_json(&weights, Some(&relevance)).as_bytes())?;
    let bars = |shares: [f64; 3]| -> Vec<(String, f64)> {
        CHANNEL_NAMES.iter().zip(shares).map(|(n, s)| (n.to_string(), s)).collect()
    };
    out.write(
        "weight_shares.svg",
        plot::bar_chart("first-layer weight share", &bars(weights.shares)).as_bytes(),
    )?;
    out.write(
        "relevance_shares.svg",
        plot::bar_chart("mean |relevance| share", &bars(relevance.shares)).as_bytes(),
    )?;
    if let Some(map) = first {
        out.write(
            "relevance_heatmap.svg",
            plot::relevance_heatmap("relevance, first explained window", &map, &STREAM_NAMES).as_bytes(),
        )?;
    }
    Ok(())
}

/// Renders a CSV (line plot), a channel profile JSON (bar chart) or an
/// experiment report JSON (test RMSE bars) to SVG.
pub fn cmd_plot(input: &Path, out_dir: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let text = read_text(input)?;
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "plot".into());
    let svg = if is_ext(input, "json") {
        plot_json(&stem, &text)?
    } else {
        plot::plot_csv(&stem, &text)?
    };
    let mut out = OutputDir::create(out_dir)?;
    out.write(&format!("{stem}.svg"), svg.as_bytes())?;
    let cfg = serde_json::json!({ "input": input.display().to_string() });
    let manifest = RunManifest::new(
        "plot",
        None,
        &cfg,
        vec![input.display().to_string()],
        out_dir,
        0,
        started,
    );
    out.finish(manifest)
}

fn plot_json(title: &str, text: &str) -> Result<String, CliError> {
    let v: serde_json::Value = config::parse_json(text, title)?;
    let shares = |p: &serde_json::Value| -> Option<Vec<(String, f64)>> {
        let s = p.get("shares")?.as_array()?;
        (s.len() == 3).then_some(())?;
        CHANNEL_NAMES
            .iter()
            .zip(s)
            .map(|(n, x)| x.as_f64().map(|x| (n.to_string(), x)))
            .collect()
    };
    if let Some(bars) = v.get("weight_profile").and_then(shares) {
        return Ok(plot::bar_chart(&format!("{title}: first-layer weight share"), &bars));
    }
    if let Some(t) = v.get("test") {
        let bars: Option<Vec<(String, f64)>> = ["cnn_rmse", "ror_rmse", "cnn_mae", "ror_mae"]
            .iter()
            .map(|k| t.get(*k).and_then(|x| x.as_f64()).map(|x| (k.to_string(), x)))
            .collect();
        if let Some(bars) = bars {
            return Ok(plot::bar_chart(&format!("{title}: test metrics"), &bars));
        }
    }
    Err(plot::PlotError::UnknownColumns("JSON is neither a channel profile nor a report".into()).into())
}

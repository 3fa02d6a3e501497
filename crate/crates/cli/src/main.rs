use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use mocom::codec::{encode, parse_compact, render, Message};
use mocom::dataset::{build_dataset, load_dataset, save_dataset, DatasetConfig};
use mocom::event::io::{load_events, save_events, save_frames};
use mocom::event::{frame_by_count, frame_by_time, Resolution, DEFAULT_WINDOW_MS};
use mocom::imsr::{decode_stream, noise_filter, DecoderConfig, NoiseFilterConfig, SegmentClassifier};
use mocom::par::Exec;
use mocom::segmentation::{eval_segments, segment_detailed, MotionSegment, SegConfig};
use mocom::snn::{count_cost, count_params, load_checkpoint, save_checkpoint, train, CostReport, NetworkSpec, TrainConfig};
use mocom::synthgen::{generate_with_log, script_from_symbols, DistanceScale, GenConfig, GenLog, MotionScript};

#[derive(Parser)]
#[command(name = "mocom", version, about = "Motion-coded messaging over event streams")]
struct Cli {
    /// Seed for every random component of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file with module configs (`gen`, `seg`, `filter`, `decoder`,
    /// `network`, `train`, `dataset`); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Primary output path; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a flight command into its symbol code.
    Encode(EncodeArgs),
    /// Generate a synthetic event stream for a message or motion script.
    Gen(GenArgs),
    /// Fixed-window frame counts of an event file, as CSV.
    Frames(FramesArgs),
    /// Segment an event file into actions.
    Segment(SegmentArgs),
    /// Compare predicted segments with generator ground truth.
    EvalSeg(EvalSegArgs),
    /// Build a synthetic recognition dataset directory.
    Dataset(DatasetArgs),
    /// Train the recognition network.
    Train(TrainArgs),
    /// Classify one event segment.
    Classify(ClassifyArgs),
    /// Decode a recorded transmission end to end.
    Decode(DecodeArgs),
    /// Parameter, operation and energy counts.
    Cost(CostArgs),
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    direction: u8,
    #[arg(long)]
    angle: u8,
    #[arg(long)]
    distance: u8,
}

#[derive(Args)]
struct GenArgs {
    /// Compact message code such as `S000010E`.
    #[arg(long, conflicts_with = "script")]
    code: Option<String>,
    /// JSON list of motion steps.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long, default_value_t = 3.5)]
    action_s: f64,
    #[arg(long, default_value_t = 3.0)]
    pause_s: f64,
    #[arg(long, default_value_t = 128)]
    width: u16,
    #[arg(long, default_value_t = 128)]
    height: u16,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    speed: Option<f64>,
    #[arg(long)]
    blob_radius: Option<f64>,
    #[arg(long)]
    event_rate: Option<f64>,
    #[arg(long, value_parser = parse_distance)]
    distance_scale: Option<DistanceScale>,
    /// Where to write the generator log (ground-truth intervals).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct FramesArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW_MS)]
    window_ms: u32,
    /// Apply the background-noise filter first.
    #[arg(long)]
    filter: bool,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW_MS)]
    window_ms: u32,
    /// Skip the background-noise filter.
    #[arg(long)]
    no_filter: bool,
    /// Also write the per-frame features as CSV.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    theta_r: Option<f64>,
    #[arg(long)]
    theta_v_fraction: Option<f64>,
}

#[derive(Args)]
struct EvalSegArgs {
    /// Output of `segment`.
    #[arg(long)]
    pred: PathBuf,
    /// Generator log written by `gen --log`.
    #[arg(long)]
    log: PathBuf,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    time_steps: Option<usize>,
    #[arg(long)]
    res: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `dataset`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Where to write the per-epoch curves CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    events: PathBuf,
    /// Segment bounds in microseconds; the whole file when absent.
    #[arg(long, requires = "end_us")]
    start_us: Option<u64>,
    #[arg(long)]
    end_us: Option<u64>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Frames handed to the decoder per step; all at once when absent.
    #[arg(long)]
    batch_frames: Option<usize>,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long, default_value_t = 128)]
    res: usize,
    /// Trained model; its spec replaces `--res`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset directory whose test split is used as the activity probe.
    #[arg(long, requires = "model")]
    probe: Option<PathBuf>,
}

fn parse_distance(s: &str) -> std::result::Result<DistanceScale, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("expected short, medium or long, got `{s}`"))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    gen: GenConfig,
    seg: SegConfig,
    filter: NoiseFilterConfig,
    decoder: DecoderConfig,
    network: NetworkSpec,
    train: TrainConfig,
    dataset: DatasetConfig,
}

#[derive(Serialize)]
struct FileHash {
    path: PathBuf,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    command: &'static str,
    version: &'static str,
    seed: u64,
    config: Value,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

struct Run {
    seed: u64,
    exec: Exec,
    out: Option<PathBuf>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn input(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    fn out_required(&mut self, what: &str) -> Result<PathBuf> {
        match &self.out {
            Some(p) => {
                self.outputs.push(p.clone());
                Ok(p.clone())
            }
            None => bail!("{what} needs --out"),
        }
    }

    /// Writes the primary text output to `--out` or stdout.
    fn emit(&mut self, text: &str) -> Result<()> {
        match &self.out {
            Some(p) => {
                fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
                self.outputs.push(p.clone());
            }
            None => {
                let mut so = std::io::stdout().lock();
                so.write_all(text.as_bytes())?;
                if !text.ends_with('\n') {
                    so.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    }

    fn side(&mut self, p: &Path, text: &str) -> Result<()> {
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
        self.outputs.push(p.to_path_buf());
        Ok(())
    }
}

fn sha256_file(p: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if p.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(p)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            h.update(e.file_name().unwrap_or_default().as_encoded_bytes());
            h.update(sha256_file(&e)?.as_bytes());
        }
    } else {
        h.update(fs::read(p).with_context(|| format!("hashing {}", p.display()))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn hashes(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: p.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

#[derive(Serialize, Deserialize)]
struct SegmentReport {
    origin_us: u64,
    window_ms: u32,
    segments: Vec<MotionSegment>,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let mut run = Run {
        seed: cli.seed,
        exec: if cli.sequential { Exec::Sequential } else { Exec::Parallel },
        out: cli.out.clone(),
        inputs: cli.config.iter().cloned().collect(),
        outputs: Vec::new(),
    };
    let (name, used): (&'static str, Value) = match cli.cmd {
        Command::Encode(a) => ("encode", cmd_encode(&mut run, a)?),
        Command::Gen(a) => ("gen", cmd_gen(&mut run, &mut cfg, a)?),
        Command::Frames(a) => ("frames", cmd_frames(&mut run, &cfg, a)?),
        Command::Segment(a) => ("segment", cmd_segment(&mut run, &mut cfg, a)?),
        Command::EvalSeg(a) => ("eval-seg", cmd_eval_seg(&mut run, a)?),
        Command::Dataset(a) => ("dataset", cmd_dataset(&mut run, &mut cfg, a)?),
        Command::Train(a) => ("train", cmd_train(&mut run, &mut cfg, a)?),
        Command::Classify(a) => ("classify", cmd_classify(&mut run, a)?),
        Command::Decode(a) => ("decode", cmd_decode(&mut run, &cfg, a)?),
        Command::Cost(a) => ("cost", cmd_cost(&mut run, a)?),
    };
    let manifest = Manifest {
        command: name,
        version: env!("CARGO_PKG_VERSION"),
        seed: run.seed,
        config: used,
        inputs: hashes(&run.inputs)?,
        outputs: hashes(&run.outputs)?,
    };
    let text = to_json(&manifest)?;
    match &run.out {
        Some(p) => {
            let mut m = p.clone().into_os_string();
            m.push(".manifest.json");
            fs::write(&m, text).with_context(|| format!("writing {}", Path::new(&m).display()))?;
        }
        None => eprintln!("{text}"),
    }
    Ok(())
}

fn cmd_encode(run: &mut Run, a: EncodeArgs) -> Result<Value> {
    let msg = Message::new(a.direction, a.angle, a.distance)?;
    run.emit(&render(&encode(&msg)?))?;
    Ok(json!({ "message": msg }))
}

fn cmd_gen(run: &mut Run, cfg: &mut RunConfig, a: GenArgs) -> Result<Value> {
    let res = Resolution::new(a.width, a.height);
    let script = match (&a.code, &a.script) {
        (Some(code), None) => script_from_symbols(&parse_compact(code)?, a.action_s, a.pause_s, res)?,
        (None, Some(p)) => MotionScript::from_json(
            &fs::read_to_string(run.input(p)).with_context(|| format!("reading {}", p.display()))?,
            res,
        )?,
        _ => bail!("gen needs exactly one of --code or --script"),
    };
    let g = &mut cfg.gen;
    g.seed = run.seed;
    g.noise_rate = a.noise_rate.unwrap_or(g.noise_rate);
    g.speed = a.speed.unwrap_or(g.speed);
    g.blob_radius = a.blob_radius.unwrap_or(g.blob_radius);
    g.event_rate = a.event_rate.unwrap_or(g.event_rate);
    g.distance_scale = a.distance_scale.unwrap_or(g.distance_scale);
    let (stream, log) = generate_with_log(&script, g)?;
    let out = run.out_required("gen")?;
    save_events(&stream, &out)?;
    let log_text = to_json(&log)?;
    match &a.log {
        Some(p) => run.side(p, &log_text)?,
        None => println!("{log_text}"),
    }
    Ok(json!({ "gen": cfg.gen, "script": script.steps, "resolution": res }))
}

fn cmd_frames(run: &mut Run, cfg: &RunConfig, a: FramesArgs) -> Result<Value> {
    let mut stream = load_events(&run.input(&a.events), Resolution::default())?;
    if a.filter {
        stream = noise_filter(&stream, &cfg.filter)?;
    }
    let frames = frame_by_time(&stream, a.window_ms)?;
    match run.out.clone() {
        Some(p) => {
            save_frames(&frames, &p)?;
            run.outputs.push(p);
        }
        None => mocom::event::io::write_frames(&frames, std::io::stdout().lock())?,
    }
    Ok(json!({ "window_ms": a.window_ms, "filter": a.filter.then_some(cfg.filter) }))
}

fn cmd_segment(run: &mut Run, cfg: &mut RunConfig, a: SegmentArgs) -> Result<Value> {
    cfg.seg.theta_r = a.theta_r.unwrap_or(cfg.seg.theta_r);
    cfg.seg.theta_v_fraction = a.theta_v_fraction.unwrap_or(cfg.seg.theta_v_fraction);
    cfg.seg.validate()?;
    let mut stream = load_events(&run.input(&a.events), Resolution::default())?;
    if !a.no_filter {
        stream = noise_filter(&stream, &cfg.filter)?;
    }
    let frames = frame_by_time(&stream, a.window_ms)?;
    let (features, segments) = segment_detailed(&frames, &cfg.seg);
    if let Some(p) = &a.features {
        let mut csv = String::from("frame,r,v,r_smooth,v_smooth,g\n");
        for n in 0..features.g.len() {
            csv.push_str(&format!(
                "{n},{:.6},{:.6},{:.6},{:.6},{}\n",
                features.r[n], features.v[n], features.r_smooth[n], features.v_smooth[n], features.g[n]
            ));
        }
        run.side(p, &csv)?;
    }
    let report = SegmentReport {
        origin_us: frames.origin_us,
        window_ms: a.window_ms,
        segments,
    };
    run.emit(&to_json(&report)?)?;
    Ok(json!({ "seg": cfg.seg, "filter": (!a.no_filter).then_some(cfg.filter), "window_ms": a.window_ms }))
}

fn cmd_eval_seg(run: &mut Run, a: EvalSegArgs) -> Result<Value> {
    let pred: SegmentReport = serde_json::from_str(&fs::read_to_string(run.input(&a.pred))?).context("parsing --pred")?;
    let log: GenLog = serde_json::from_str(&fs::read_to_string(run.input(&a.log))?).context("parsing --log")?;
    let gt = log.action_frames(pred.origin_us, pred.window_ms);
    let m = eval_segments(&pred.segments, &gt);
    run.emit(&to_json(
        &json!({ "detected": pred.segments.len(), "ground_truth": gt.len(), "metrics": m }),
    )?)?;
    Ok(json!({}))
}

fn cmd_dataset(run: &mut Run, cfg: &mut RunConfig, a: DatasetArgs) -> Result<Value> {
    let d = &mut cfg.dataset;
    d.seed = run.seed;
    d.samples_per_class = a.samples_per_class.unwrap_or(d.samples_per_class);
    d.time_steps = a.time_steps.unwrap_or(d.time_steps);
    d.input_size = a.res.unwrap_or(d.input_size);
    let out = run.out_required("dataset")?;
    let ds = build_dataset(d, run.exec)?;
    save_dataset(&ds, d, &out)?;
    println!("{}", to_json(&json!({ "train": ds.train.len(), "test": ds.test.len() }))?);
    Ok(json!({ "dataset": cfg.dataset }))
}

fn cmd_train(run: &mut Run, cfg: &mut RunConfig, a: TrainArgs) -> Result<Value> {
    let (ds, dcfg) = load_dataset(&run.input(&a.data))?;
    let t = &mut cfg.train;
    t.seed = run.seed;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = a.lr.unwrap_or(t.learning_rate);
    let spec = NetworkSpec {
        input_h: dcfg.input_size,
        input_w: dcfg.input_size,
        time_steps: dcfg.time_steps,
        ..cfg.network
    };
    let out = run.out_required("train")?;
    let report = train(spec, &ds.train, &ds.test, t, run.exec)?;
    save_checkpoint(&report.network, &out)?;
    let csv = report.curves_csv();
    match &a.curves {
        Some(p) => run.side(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(json!({ "network": spec, "train": cfg.train }))
}

fn cmd_classify(run: &mut Run, a: ClassifyArgs) -> Result<Value> {
    let net = load_checkpoint(&run.input(&a.model))?;
    let mut stream = load_events(
        &run.input(&a.events),
        Resolution::new(net.spec.input_w as u16, net.spec.input_h as u16),
    )?;
    if let (Some(s), Some(e)) = (a.start_us, a.end_us) {
        stream = stream.slice_time(s, e);
    }
    let symbol = net.classify(&stream)?;
    let x = frame_by_count(&stream, net.spec.time_steps, net.spec.input_h, net.spec.input_w)?;
    let scores = net.forward(&x)?;
    run.emit(&to_json(&json!({ "symbol": symbol, "scores": scores }))?)?;
    Ok(json!({ "start_us": a.start_us, "end_us": a.end_us }))
}

fn cmd_decode(run: &mut Run, cfg: &RunConfig, a: DecodeArgs) -> Result<Value> {
    let net = load_checkpoint(&run.input(&a.model))?;
    let stream = load_events(&run.input(&a.events), Resolution::default())?;
    let report = decode_stream(&stream, &cfg.decoder, &net, a.batch_frames, run.exec)?;
    run.emit(&report.to_json()?)?;
    Ok(json!({ "decoder": cfg.decoder, "batch_frames": a.batch_frames }))
}

fn cmd_cost(run: &mut Run, a: CostArgs) -> Result<Value> {
    let report = match (&a.model, &a.probe) {
        (Some(m), Some(p)) => {
            let net = load_checkpoint(&run.input(m))?;
            let (ds, _) = load_dataset(&run.input(p))?;
            let probe: Vec<_> = ds.test.into_iter().map(|s| s.tensor).collect();
            count_cost(&net, &probe)?
        }
        (Some(m), None) => {
            let net = load_checkpoint(&run.input(m))?;
            structural_only(&net.spec)
        }
        _ => structural_only(&NetworkSpec::with_input(a.res)),
    };
    run.emit(&to_json(&report)?)?;
    Ok(json!({ "res": a.res }))
}

/// Counts that need no probe: parameters only, operation counts zero.
fn structural_only(spec: &NetworkSpec) -> CostReport {
    CostReport {
        params: count_params(spec),
        acs: 0.0,
        macs: 0.0,
        energy_mj: 0.0,
        probe_samples: 0,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let err = json!({ "error": { "kind": "usage", "message": e.to_string().trim() } });
            eprintln!("{err}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.downcast_ref::<mocom::Error>() {
                Some(mocom::Error::Io { .. }) => "io",
                Some(mocom::Error::Parse { .. }) => "parse",
                Some(mocom::Error::Codec(_)) => "codec",
                Some(_) => "module",
                None if e.downcast_ref::<mocom::codec::CodecError>().is_some() => "codec",
                None if e.downcast_ref::<std::io::Error>().is_some() => "io",
                None => "error",
            };
            let err = json!({ "error": { "kind": kind, "message": format!("{e:#}") } });
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}

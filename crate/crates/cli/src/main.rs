use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use farfield::audio::{read_wav, write_wav, write_wav_f32, MultichannelAudio};
use farfield::beamform::{beamform, TdoaConfig};
use farfield::diarize::{first_pass, AhcStop, FirstPassConfig, PldaModel, ReferenceExtractor};
use farfield::gss::{gss_enhance_many, GssConfig};
use farfield::harness::{
    format_score, run_pipeline, simulate_scene, train_synthetic_plda, utterance_file_name,
    PipelineConfig, PipelineInputs, SceneSpec, StageCache, Track,
};
use farfield::metrics::{compute_der, emit_rttm, parse_rttm, Rttm, ScoringOptions};
use farfield::reseg::{resegment, HeuristicOverlap, OverlapDetector, OverlapMask, ResegConfig};
use farfield::sad::{detect_speech, sad_features, Fusion, ReferencePosteriors, SadHmmConfig};
use farfield::segments::SegmentList;
use farfield::wpe::{wpe_process, WpeConfig};

/// Multi-array far-field enhancement and diarization.
#[derive(Parser)]
#[command(name = "farfield", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-array scene with its reference annotation.
    Simulate(SimulateArgs),
    /// Online WPE dereverberation of one multichannel recording.
    Wpe(WpeArgs),
    /// GCC-PHAT delay-and-sum beamforming to a single channel.
    Beamform(BeamformArgs),
    /// Speech activity detection fused across arrays.
    Sad(SadArgs),
    /// First-pass diarization: PLDA-scored embeddings and AHC.
    Diarize(DiarizeArgs),
    /// Overlap-aware VB-HMM resegmentation of a first-pass RTTM.
    Reseg(ResegArgs),
    /// Guided source separation of one speaker's utterances.
    Gss(GssArgs),
    /// DER and JER of a hypothesis RTTM.
    Score(ScoreArgs),
    /// The full pipeline driven by a configuration file.
    Run(RunArgs),
    /// Train a PLDA model on simulated speakers.
    PldaTrain(PldaTrainArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 4)]
    speakers: usize,
    #[arg(long, default_value_t = 2)]
    arrays: usize,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    /// Seconds.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    /// Fraction of speech time with more than one speaker.
    #[arg(long, default_value_t = 0.0)]
    overlap: f64,
    #[arg(long, default_value_t = 20.0)]
    snr: f64,
    /// Reverberation time in seconds (0 = anechoic).
    #[arg(long, default_value_t = 0.0)]
    t60: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16000)]
    sample_rate: u32,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Args)]
struct WpeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    taps: Option<usize>,
    #[arg(long)]
    delay: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    psd_context: Option<usize>,
}

#[derive(Args)]
struct BeamformArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seconds per delay estimate.
    #[arg(long)]
    block_len: Option<f64>,
    /// Largest delay searched, in seconds.
    #[arg(long)]
    max_delay: Option<f64>,
    #[arg(long)]
    confidence_threshold: Option<f64>,
}

#[derive(Args)]
struct SadArgs {
    /// One recording per array.
    #[arg(long = "in", required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long, default_value = "max")]
    fusion: Fusion,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    min_speech: Option<f64>,
    #[arg(long)]
    min_silence: Option<f64>,
    #[arg(long)]
    max_speech: Option<f64>,
}

#[derive(Args)]
struct DiarizeArgs {
    /// Speech segments file from `sad`.
    #[arg(long)]
    sad: PathBuf,
    /// One recording per array.
    #[arg(long = "in", required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    plda: PathBuf,
    #[arg(long, default_value = "max")]
    fusion: Fusion,
    #[arg(long, conflicts_with = "threshold")]
    num_speakers: Option<usize>,
    /// Stop merging when the best average PLDA score falls below this.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 1.5)]
    window: f64,
    #[arg(long, default_value_t = 0.25)]
    stride: f64,
    /// Defaults to the file stem of the first input.
    #[arg(long)]
    recording_id: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ResegArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// First-pass RTTM.
    #[arg(long)]
    rttm: PathBuf,
    /// `oracle:<spans file>`, `heuristic` or `off`.
    #[arg(long, default_value = "heuristic")]
    overlap: String,
    #[arg(long)]
    min_segment: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GssArgs {
    /// One recording per array.
    #[arg(long = "in", required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Segments of every speaker in the recording.
    #[arg(long)]
    rttm: PathBuf,
    #[arg(long)]
    speaker: String,
    /// Seconds of context on each side of an utterance.
    #[arg(long, default_value_t = 20.0)]
    context: f64,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    collar: f64,
    #[arg(long)]
    ignore_overlap: bool,
}

#[derive(Args)]
struct RunArgs {
    /// `stage.param = value` lines; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One recording per array.
    #[arg(long = "in", required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Oracle segments with speaker labels (track 1).
    #[arg(long)]
    oracle_rttm: Option<PathBuf>,
    /// Reference for scoring and for the oracle overlap detector.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Defaults to the file stem of the first input.
    #[arg(long)]
    recording_id: Option<String>,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Args)]
struct PldaTrainArgs {
    #[arg(long, default_value_t = 12)]
    scenes: usize,
    #[arg(long)]
    out: PathBuf,
}

/// A request that is well-formed for the parser but unusable.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<farfield::Error>() {
        Some(farfield::Error::InvalidParameter(_) | farfield::Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Wpe(a) => wpe(a),
        Command::Beamform(a) => beamform_cmd(a),
        Command::Sad(a) => sad(a),
        Command::Diarize(a) => diarize(a),
        Command::Reseg(a) => reseg(a),
        Command::Gss(a) => gss(a),
        Command::Score(a) => score(a),
        Command::Run(a) => run(a),
        Command::PldaTrain(a) => plda_train(a),
    }
}

fn read_all(paths: &[PathBuf]) -> anyhow::Result<Vec<MultichannelAudio>> {
    paths
        .iter()
        .map(|p| read_wav(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    if !path.exists() {
        return Err(farfield::Error::MissingFile(path.to_path_buf()).into());
    }
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_rttm(path: &Path) -> anyhow::Result<Rttm> {
    parse_rttm(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))
}

/// The single recording described by an RTTM file.
fn only_recording(rttm: &Rttm, path: &Path) -> anyhow::Result<String> {
    let recs = rttm.recordings();
    match recs.len() {
        1 => Ok(recs.into_iter().next().expect("one recording")),
        0 => bail!(farfield::Error::Empty("RTTM has no speaker records")),
        n => Err(usage(format!(
            "{} holds {n} recordings; pass one recording per file",
            path.display()
        ))),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "rec".into(), |s| s.to_string_lossy().into_owned())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let spec = SceneSpec {
        num_speakers: a.speakers,
        num_arrays: a.arrays,
        channels_per_array: a.channels,
        duration_sec: a.duration,
        overlap_ratio: a.overlap,
        snr_db: a.snr,
        reverb_t60_sec: a.t60,
        seed: a.seed,
        sample_rate: a.sample_rate,
    };
    let (arrays, truth) = simulate_scene(&spec)?;
    std::fs::create_dir_all(&a.outdir)?;
    let rec = spec.recording_id();
    for (i, audio) in arrays.iter().enumerate() {
        write_wav_f32(a.outdir.join(format!("{rec}.array{i}.wav")), audio)?;
    }
    write_text(
        &a.outdir.join(format!("{rec}.rttm")),
        &emit_rttm(&truth.reference),
    )?;
    let frames = farfield::segments::frames_for(spec.duration_sec, 0.01);
    let overlap = truth.oracle_overlap(frames, 0.01).to_spans();
    write_text(&a.outdir.join(format!("{rec}.overlap")), &overlap.to_text())?;
    println!(
        "{rec}: {} arrays, overlap {:.3}",
        arrays.len(),
        truth.overlap_fraction()
    );
    Ok(())
}

fn wpe(a: WpeArgs) -> anyhow::Result<()> {
    let d = WpeConfig::default();
    let cfg = WpeConfig {
        taps: a.taps.unwrap_or(d.taps),
        delay: a.delay.unwrap_or(d.delay),
        alpha: a.alpha.unwrap_or(d.alpha),
        psd_context: a.psd_context.unwrap_or(d.psd_context),
        ..d
    };
    cfg.validate()?;
    let audio = read_wav(&a.input)?;
    write_wav_f32(&a.out, &wpe_process(&audio, cfg)?)?;
    Ok(())
}

fn beamform_cmd(a: BeamformArgs) -> anyhow::Result<()> {
    let d = TdoaConfig::default();
    let cfg = TdoaConfig {
        block_len_sec: a.block_len.unwrap_or(d.block_len_sec),
        max_delay_sec: a.max_delay.unwrap_or(d.max_delay_sec),
        confidence_threshold: a.confidence_threshold.unwrap_or(d.confidence_threshold),
    };
    if !(cfg.block_len_sec > 0.0 && cfg.max_delay_sec >= 0.0) {
        return Err(usage(
            "--block-len must be positive and --max-delay non-negative",
        ));
    }
    let audio = read_wav(&a.input)?;
    write_wav_f32(&a.out, &beamform(&audio, &cfg)?)?;
    Ok(())
}

fn sad(a: SadArgs) -> anyhow::Result<()> {
    let d = SadHmmConfig::default();
    let cfg = SadHmmConfig {
        min_speech_sec: a.min_speech.unwrap_or(d.min_speech_sec),
        min_silence_sec: a.min_silence.unwrap_or(d.min_silence_sec),
        max_speech_sec: a.max_speech.unwrap_or(d.max_speech_sec),
        ..d
    };
    cfg.validate()?;
    let arrays = read_all(&a.input)?;
    let speech = detect_speech(&arrays, &ReferencePosteriors::default(), a.fusion, &cfg)?;
    write_text(&a.out, &speech.to_text())
}

fn diarize(a: DiarizeArgs) -> anyhow::Result<()> {
    let stop = match (a.num_speakers, a.threshold) {
        (Some(0), _) => return Err(usage("--num-speakers must be positive")),
        (Some(k), _) => AhcStop::NumClusters(k),
        (None, Some(t)) => AhcStop::Threshold(t),
        (None, None) => AhcStop::NumClusters(4),
    };
    if !(a.window > 0.0 && a.stride > 0.0 && a.stride <= a.window) {
        return Err(usage("need 0 < --stride <= --window"));
    }
    let cfg = FirstPassConfig {
        window_sec: a.window,
        stride_sec: a.stride,
        fusion: a.fusion,
        stop,
    };
    let speech = SegmentList::parse(&read_text(&a.sad)?)?;
    let plda = PldaModel::load(&a.plda)?;
    let arrays = read_all(&a.input)?;
    let segs = first_pass(&arrays, &speech, &ReferenceExtractor, &plda, &cfg)?;
    let rec = a.recording_id.unwrap_or_else(|| stem(&a.input[0]));
    write_text(&a.out, &emit_rttm(&Rttm::from_segments(&rec, &segs)))
}

fn reseg(a: ResegArgs) -> anyhow::Result<()> {
    let rttm = read_rttm(&a.rttm)?;
    let rec = only_recording(&rttm, &a.rttm)?;
    let first = rttm.segments(&rec);
    let audio = read_wav(&a.input)?;
    let feats = sad_features(&audio)?;
    let (n, h) = (feats.num_frames(), feats.frame_shift_sec);
    let overlap = match a.overlap.as_str() {
        "heuristic" => HeuristicOverlap::default().detect(&feats)?,
        "off" => OverlapMask {
            flags: vec![false; n],
            frame_shift_sec: h,
        },
        other => match other.strip_prefix("oracle:") {
            Some(path) => {
                OverlapMask::from_spans(&SegmentList::parse(&read_text(Path::new(path))?)?, n, h)
            }
            None => {
                return Err(usage(format!(
                    "--overlap must be oracle:<file>, heuristic or off, got `{other}`"
                )))
            }
        },
    };
    let cfg = ResegConfig {
        min_segment_sec: a
            .min_segment
            .unwrap_or(ResegConfig::default().min_segment_sec),
        ..ResegConfig::default()
    };
    let speech = first.union("speech", h);
    let segs = resegment(&feats, &first, &speech, &overlap, &cfg)?;
    write_text(&a.out, &emit_rttm(&Rttm::from_segments(&rec, &segs)))
}

fn gss(a: GssArgs) -> anyhow::Result<()> {
    let rttm = read_rttm(&a.rttm)?;
    let rec = only_recording(&rttm, &a.rttm)?;
    let segments = rttm.segments(&rec);
    let targets: Vec<_> = segments
        .iter()
        .filter(|s| s.label == a.speaker)
        .cloned()
        .collect();
    if targets.is_empty() {
        return Err(usage(format!(
            "speaker `{}` has no segments in {}",
            a.speaker,
            a.rttm.display()
        )));
    }
    let d = GssConfig::default();
    let cfg = GssConfig {
        context_sec: a.context,
        iterations: a.iterations.unwrap_or(d.iterations),
        ..d
    };
    if !(cfg.context_sec >= 0.0) || cfg.iterations == 0 {
        return Err(usage("need --context >= 0 and --iterations >= 1"));
    }
    let arrays = read_all(&a.input)?;
    let outputs = gss_enhance_many(&arrays, &segments, &targets, &cfg)?;
    std::fs::create_dir_all(&a.outdir)?;
    for (utt, out) in targets.iter().zip(&outputs) {
        write_wav(
            a.outdir
                .join(utterance_file_name(&utt.label, utt.onset, utt.end())),
            &out.audio,
        )?;
    }
    println!(
        "{} utterances written to {}",
        outputs.len(),
        a.outdir.display()
    );
    Ok(())
}

fn score(a: ScoreArgs) -> anyhow::Result<()> {
    if !(a.collar >= 0.0) {
        return Err(usage("--collar must be non-negative"));
    }
    let options = ScoringOptions {
        collar_sec: a.collar,
        score_overlap: !a.ignore_overlap,
    };
    let s = compute_der(&read_rttm(&a.reference)?, &read_rttm(&a.hyp)?, &options)?;
    print!("{}", format_score(&s));
    Ok(())
}

fn run(a: RunArgs) -> anyhow::Result<()> {
    let config = match &a.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let rec = a.recording_id.clone().unwrap_or_else(|| stem(&a.input[0]));
    let segments_of = |path: &Option<PathBuf>| -> anyhow::Result<Option<SegmentList>> {
        let Some(path) = path else { return Ok(None) };
        let rttm = read_rttm(path)?;
        if !rttm.recordings().contains(&rec) {
            return Err(usage(format!(
                "{} has no records for recording `{rec}`",
                path.display()
            )));
        }
        Ok(Some(rttm.segments(&rec)))
    };
    let inputs = PipelineInputs {
        recording_id: rec.clone(),
        arrays: read_all(&a.input)?,
        oracle_segments: segments_of(&a.oracle_rttm)?,
        reference: segments_of(&a.reference)?,
    };
    if config.track == Track::Oracle && inputs.oracle_segments.is_none() {
        return Err(usage("track1 needs --oracle-rttm"));
    }
    let cache = StageCache::from_env(a.outdir.join("cache"));
    let report = run_pipeline(&config, &inputs, &a.outdir, &cache)?;
    for stage in &report.stages {
        println!(
            "{:<9} {}",
            stage.stage,
            if stage.cached { "cached" } else { "computed" }
        );
    }
    println!("rttm {}", report.rttm_path.display());
    if let Some(s) = &report.score {
        print!("{}", format_score(s));
    }
    Ok(())
}

fn plda_train(a: PldaTrainArgs) -> anyhow::Result<()> {
    if a.scenes == 0 {
        return Err(usage("--scenes must be positive"));
    }
    let model = train_synthetic_plda(&ReferenceExtractor, a.scenes)?;
    model.save(&a.out)?;
    Ok(())
}

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use omnicodec::checkpoint::{load_codec, Checkpoint};
use omnicodec::config::{bitrate_bps, load_config};
use omnicodec::eval::{eval_recon, token_ppl, PplMode, TokenLmConfig};
use omnicodec::resample::Resampler;
use omnicodec::token_io::{read_header, read_token_file, wav_read, wav_write, write_token_file, TokenMatrix, TOKEN_MAGIC};
use omnicodec::train::{DataSource, Dataset, TrainConfig, TrainState};
use omnicodec::{CodecConfig, ErrorClass, PcmBuffer};

#[derive(Parser)]
#[command(name = "omnicodec", version, about = "Streaming neural audio codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a codec and write checkpoints into a directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `synthetic`, a directory of WAV files, or a single `.wav` clip.
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// WAV to token file.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Feed the encoder in fixed chunks of this many milliseconds.
        #[arg(long)]
        chunk_ms: Option<f64>,
    },
    /// Token file to WAV.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mel distance, MCD and codebook utilization over a WAV directory.
    EvalRecon {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        wavs: PathBuf,
        /// Write the report here instead of stderr.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Token-LM perplexity of token files.
    EvalPpl {
        #[arg(long)]
        tokens_train: PathBuf,
        #[arg(long)]
        tokens_eval: PathBuf,
        #[arg(long, default_value = "ppl0")]
        mode: String,
        /// Defaults to 2^bits from the token headers.
        #[arg(long)]
        vocab: Option<usize>,
        /// Use the small LM instead of the default 4-layer one.
        #[arg(long)]
        tiny: bool,
        #[arg(long)]
        lm_steps: Option<usize>,
    },
    /// Summarize a token file or checkpoint.
    Info {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<omnicodec::Error>() {
            return match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Io => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            };
        }
        if cause.downcast_ref::<io::Error>().is_some() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // causes already spelled out by their parent are not repeated
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            data,
            steps,
            out,
            resume,
        } => cmd_train(&config, data, steps, &out, resume.as_deref()),
        Command::Encode {
            ckpt,
            input,
            out,
            chunk_ms,
        } => cmd_encode(&ckpt, &input, &out, chunk_ms),
        Command::Decode { ckpt, input, out } => cmd_decode(&ckpt, &input, &out),
        Command::EvalRecon { ckpt, wavs, out, json } => cmd_eval_recon(&ckpt, &wavs, out.as_deref(), json),
        Command::EvalPpl {
            tokens_train,
            tokens_eval,
            mode,
            vocab,
            tiny,
            lm_steps,
        } => cmd_eval_ppl(&tokens_train, &tokens_eval, &mode, vocab, tiny, lm_steps),
        Command::Info { input } => cmd_info(&input),
    }
}

/// Writes every line to both sinks.
struct Tee<A, B>(A, B);

impl<A: Write, B: Write> Write for Tee<A, B> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write_all(buf)?;
        self.1.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()?;
        self.1.flush()
    }
}

fn cmd_train(config: &Path, data: Option<String>, steps: Option<u64>, out: &Path, resume: Option<&Path>) -> Result<()> {
    let mut cfg: CodecConfig = load_config(config)?;
    cfg.apply_env_overrides()?;
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut train = TrainConfig::parse(&text)?;
    if let Some(d) = data {
        train.data_source = DataSource::parse(&d);
    }
    if let Some(s) = steps {
        train.steps = s;
    }
    std::fs::create_dir_all(out).map_err(|e| omnicodec::Error::io(out, e))?;
    let mut state = match resume {
        Some(p) => {
            let s = TrainState::load(p, train.clone())?;
            if s.codec.cfg.config_hash() != cfg.config_hash() {
                return Err(omnicodec::Error::ConfigHashMismatch(format!(
                    "{} was trained with a different architecture than {}",
                    p.display(),
                    config.display()
                ))
                .into());
            }
            s
        }
        None => TrainState::new(cfg.validate()?, train.clone())?,
    };
    let dataset = Dataset::open(&train, state.codec.cfg.sample_rate_hz)?;
    info!(
        "training {} parameters from step {} to {}",
        state.codec.num_params(),
        state.step,
        train.steps
    );
    let log_path = out.join("train.log");
    let log_file = File::options()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| omnicodec::Error::io(&log_path, e))?;
    let mut log = Tee(io::BufWriter::new(log_file), io::stderr());
    state.run(&dataset, &mut log, Some(out))?;
    log.flush()?;
    info!("wrote {}", out.join("latest.omck").display());
    Ok(())
}

fn read_input_wav(path: &Path, rate: u32) -> Result<PcmBuffer> {
    let pcm = wav_read(path)?;
    if pcm.sample_rate_hz == rate {
        return Ok(pcm);
    }
    info!("resampling {} from {} Hz to {rate} Hz", path.display(), pcm.sample_rate_hz);
    let r = Resampler::new(pcm.sample_rate_hz, rate)?;
    Ok(PcmBuffer::new(r.process(&pcm.samples), rate))
}

fn cmd_encode(ckpt: &Path, input: &Path, out: &Path, chunk_ms: Option<f64>) -> Result<()> {
    let codec = load_codec(ckpt)?;
    let sr = codec.cfg.sample_rate_hz;
    let pcm = read_input_wav(input, sr)?;
    let tokens = match chunk_ms {
        None => codec.encode(&pcm)?,
        Some(ms) => {
            if !(ms > 0.0 && ms.is_finite()) {
                return Err(omnicodec::Error::InvalidConfig(format!("--chunk-ms must be positive, got {ms}")).into());
            }
            let chunk = ((sr as f64 * ms / 1000.0).round() as usize).max(1);
            let mut enc = codec.token_encoder()?;
            let mut tokens = TokenMatrix::empty(codec.cfg.total_streams(), codec.cfg.semantic_branch);
            for c in pcm.samples.chunks(chunk) {
                tokens.extend(&enc.push(c)?)?;
            }
            tokens.extend(&enc.finish()?)?;
            tokens
        }
    };
    write_token_file(out, &tokens, codec.stream_format())?;
    info!("{} frames x {} streams -> {}", tokens.frames, tokens.streams, out.display());
    Ok(())
}

fn cmd_decode(ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let codec = load_codec(ckpt)?;
    let (tokens, header) = read_token_file(input)?;
    codec.check_header(&header)?;
    let pcm = codec.decode(&tokens)?;
    wav_write(out, &pcm)?;
    info!("{} frames -> {} samples in {}", tokens.frames, pcm.len(), out.display());
    Ok(())
}

fn cmd_eval_recon(ckpt: &Path, wavs: &Path, out: Option<&Path>, json: bool) -> Result<()> {
    let codec = load_codec(ckpt)?;
    let report = eval_recon(&codec, wavs)?;
    let text = if json { report.to_json() } else { report.to_text() };
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| omnicodec::Error::io(p, e))?,
        None => eprint!("{text}"),
    }
    Ok(())
}

/// Every parseable token file of `dir`, sorted by name.
fn token_corpus(dir: &Path) -> Result<(Vec<TokenMatrix>, u8)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| omnicodec::Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut corpus = Vec::new();
    let mut bits = 0;
    for p in paths {
        match read_token_file(&p) {
            Ok((m, h)) => {
                bits = bits.max(h.bits_per_code);
                corpus.push(m);
            }
            Err(e) => warn!("skipping {}: {e}", p.display()),
        }
    }
    Ok((corpus, bits))
}

fn cmd_eval_ppl(train: &Path, eval: &Path, mode: &str, vocab: Option<usize>, tiny: bool, lm_steps: Option<usize>) -> Result<()> {
    let mode: PplMode = mode.parse()?;
    let (train_corpus, b1) = token_corpus(train)?;
    let (eval_corpus, b2) = token_corpus(eval)?;
    let vocab = vocab.unwrap_or(1usize << b1.max(b2));
    let mut lm = if tiny { TokenLmConfig::tiny() } else { TokenLmConfig::default() };
    if let Some(s) = lm_steps {
        lm.steps = s;
    }
    let mut seed_cfg = CodecConfig {
        seed: 0,
        ..CodecConfig::default()
    };
    seed_cfg.apply_env_overrides()?;
    lm.seed = seed_cfg.seed;
    let ppl = token_ppl(&train_corpus, &eval_corpus, mode, vocab, &lm)?;
    if !ppl.is_finite() {
        return Err(omnicodec::Error::NonFiniteLoss { term: "perplexity".into() }.into());
    }
    let label = match mode {
        PplMode::Ppl0 => "ppl0",
        PplMode::PplMean8 => "ppl8",
    };
    eprintln!("{label}={ppl:.4} vocab={vocab} train_files={} eval_files={}", train_corpus.len(), eval_corpus.len());
    Ok(())
}

fn fmt_rate(v: f64) -> String {
    format!("{v}")
}

fn cmd_info(input: &Path) -> Result<()> {
    let mut magic = [0u8; 4];
    let mut f = File::open(input).map_err(|e| omnicodec::Error::io(input, e))?;
    f.read_exact(&mut magic).map_err(|e| omnicodec::Error::io(input, e))?;
    let mut out = io::stdout().lock();
    if magic == TOKEN_MAGIC {
        let bytes = std::fs::read(input).map_err(|e| omnicodec::Error::io(input, e))?;
        let h = read_header(&bytes)?;
        let rate = h.frame_rate_hz();
        writeln!(out, "kind=tokens")?;
        writeln!(out, "frame_rate_hz={}", fmt_rate(rate))?;
        writeln!(out, "streams={}", h.streams)?;
        writeln!(out, "semantic_stream={}", h.has_semantic)?;
        writeln!(out, "tps={}\u{d7}{}", fmt_rate(rate), h.streams)?;
        writeln!(out, "bits_per_code={}", h.bits_per_code)?;
        writeln!(out, "nominal_bitrate_bps={}", bitrate_bps(rate, h.streams as u32, h.bits_per_code as u32))?;
        writeln!(out, "on_disk_bps={}", h.on_disk_bps())?;
        writeln!(out, "frames={}", h.frame_count)?;
        writeln!(out, "duration_s={}", h.duration_seconds())?;
        return Ok(());
    }
    let ck = Checkpoint::load(input)?;
    let cfg = ck.config()?;
    let codec = load_codec(input)?;
    let streams = cfg.total_streams();
    writeln!(out, "kind=checkpoint")?;
    writeln!(out, "config_hash={:016x}", ck.config_hash)?;
    if let Some(step) = ck.meta["step"].as_u64() {
        writeln!(out, "step={step}")?;
    }
    writeln!(out, "sample_rate_hz={}", cfg.sample_rate_hz)?;
    writeln!(out, "hop={}", cfg.hop)?;
    writeln!(out, "frame_rate_hz={}", fmt_rate(cfg.frame_rate_hz))?;
    writeln!(out, "streams={streams}")?;
    writeln!(out, "tps={}\u{d7}{streams}", fmt_rate(cfg.frame_rate_hz))?;
    writeln!(out, "nominal_bitrate_bps={}", cfg.nominal_bitrate_bps(streams))?;
    writeln!(out, "semantic_branch={}", cfg.semantic_branch)?;
    writeln!(out, "learned_adapter={}", cfg.learned_adapter)?;
    writeln!(out, "self_guidance={}", cfg.self_guidance)?;
    writeln!(out, "acoustic_stages={}", cfg.acoustic_stages)?;
    writeln!(out, "acoustic_codebook_size={}", cfg.acoustic_codebook_size)?;
    writeln!(out, "hidden_dim={}", cfg.hidden_dim)?;
    writeln!(out, "parameters={}", codec.num_params())?;
    Ok(())
}

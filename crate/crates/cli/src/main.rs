//! `serialcast` command-line entry point.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serialcast::backbone::{Model, ModelConfig};
use serialcast::datagen::{
    dataset_complexity, derive_seed, gen_signal, sinusoid_trend_corpus, Combine, SignalKind, SignalSpec,
    TimeSeriesSample,
};
use serialcast::dataloader::{
    build_shards, import_csv, read_all, write_csv, ShardStream, WindowSource, DATA_DIR_ENV, DEFAULT_SHARD_BYTES,
};
use serialcast::inference::{bench_inference, evaluate, forecast, forecast_rolling_ntp, ForecastOptions};
use serialcast::numerics::GradCheckReport;
use serialcast::objectives::Stage;
use serialcast::trainer::{
    gradient_check_suite, load_checkpoint, load_checkpoint_for, run_posttrain, StepReport,
    TrainConfig, Trainer,
};
use serialcast::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

// println! panics when the reader goes away (`| head`); this returns the error instead.
macro_rules! say {
    ($($arg:tt)*) => {
        writeln!(io::stdout().lock(), $($arg)*).map_err(Error::from)
    };
}

fn key_args(cmd: Command) -> Command {
    let keys = ModelConfig::KEYS.iter().chain(TrainConfig::KEYS.iter()).filter(|k| **k != "seed");
    keys.fold(cmd, |cmd, key| {
        cmd.arg(
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .help_heading("Configuration keys"),
        )
    })
}

fn cli() -> Command {
    let seed = Arg::new("seed")
        .long("seed")
        .global(true)
        .value_parser(value_parser!(u64))
        .help("Root seed for every random draw");
    let verbose = Arg::new("verbose")
        .short('v')
        .long("verbose")
        .global(true)
        .action(ArgAction::Count);
    let workers = Arg::new("workers")
        .long("workers")
        .global(true)
        .value_parser(value_parser!(usize))
        .default_value("1")
        .help("Worker threads (all paths currently run on one)");
    let config = Arg::new("config").long("config").value_name("FILE").help("key=value file");
    let preset = Arg::new("preset")
        .long("preset")
        .value_parser(["tiny", "desk", "released"])
        .default_value("desk");
    let data = Arg::new("data")
        .long("data")
        .value_name("DIR")
        .help(format!("Shard directory [default: ${DATA_DIR_ENV}]"));
    let checkpoint = Arg::new("checkpoint").long("checkpoint").value_name("FILE").required(true);

    Command::new("serialcast")
        .about("Serial-token time-series forecasting")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .args([seed, verbose, workers])
        .subcommand(
            Command::new("synth")
                .about("Generate synthetic series as CSV or shards")
                .arg(
                    Arg::new("kind")
                        .long("kind")
                        .required(true)
                        .value_parser(["linear", "sinusoidal", "exponential", "power", "impulse", "step", "toy"]),
                )
                .arg(Arg::new("length").long("length").value_parser(value_parser!(usize)).required(true))
                .arg(num_arg("amplitude", "1"))
                .arg(num_arg("period", "8"))
                .arg(num_arg("phase", "0"))
                .arg(num_arg("slope", "1"))
                .arg(num_arg("intercept", "0"))
                .arg(num_arg("scale", "1"))
                .arg(num_arg("rate", "0.01"))
                .arg(num_arg("exponent", "1"))
                .arg(Arg::new("location").long("location").value_parser(value_parser!(usize)).default_value("0"))
                .arg(num_arg("noise_sigma", "0"))
                .arg(Arg::new("combine").long("combine").value_parser(["add", "mul"]).help("Combine with a linear trend of --slope"))
                .arg(Arg::new("count").long("count").value_parser(value_parser!(usize)).default_value("1"))
                .arg(Arg::new("format").long("format").value_parser(["csv", "shard"]).default_value("csv"))
                .arg(Arg::new("shard_bytes").long("shard_bytes").value_parser(value_parser!(usize)))
                .arg(Arg::new("out").long("out").value_name("PATH")),
        )
        .subcommand(
            Command::new("shard")
                .about("Pack CSV series into shards")
                .arg(Arg::new("input").long("input").num_args(1..).required(true).value_name("CSV|DIR"))
                .arg(Arg::new("out").long("out").value_name("DIR"))
                .arg(Arg::new("shard_bytes").long("shard_bytes").value_parser(value_parser!(usize))),
        )
        .subcommand(
            Command::new("stats")
                .about("Length-weighted ADF statistic and forecastability")
                .arg(data.clone())
                .arg(Arg::new("input").long("input").num_args(1..).value_name("CSV")),
        )
        .subcommand(key_args(
            Command::new("train")
                .about("Pre-train from shards")
                .arg(config.clone())
                .arg(preset.clone())
                .arg(data.clone())
                .arg(Arg::new("resume").long("resume").value_name("FILE"))
                .arg(Arg::new("out").long("out").value_name("FILE").required(true)),
        ))
        .subcommand(key_args(
            Command::new("posttrain")
                .about("Continued pre-training on a mixture of corpora")
                .arg(config)
                .arg(Arg::new("from").long("from").value_name("FILE").required(true))
                .arg(data.clone().help("Post-training shard directory"))
                .arg(Arg::new("revisit").long("revisit").value_name("DIR").required(true))
                .arg(Arg::new("out").long("out").value_name("FILE").required(true)),
        ))
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference check of every parameter family")
                .arg(Arg::new("preset").long("preset").value_parser(["tiny"]).default_value("tiny")),
        )
        .subcommand(
            Command::new("forecast")
                .about("Forecast a CSV series")
                .arg(checkpoint.clone())
                .arg(Arg::new("input").long("input").value_name("CSV").required(true))
                .arg(Arg::new("horizon").long("horizon").value_parser(value_parser!(usize)).required(true))
                .arg(Arg::new("mode").long("mode").value_parser(["serial", "rolling"]).default_value("serial"))
                .arg(Arg::new("sort_quantiles").long("sort_quantiles").action(ArgAction::SetTrue))
                .arg(Arg::new("out").long("out").value_name("CSV")),
        )
        .subcommand(
            Command::new("eval")
                .about("Held-out MASE and wQL for serial and rolling decoding")
                .arg(checkpoint.clone())
                .arg(data)
                .arg(Arg::new("input").long("input").num_args(1..).value_name("CSV"))
                .arg(Arg::new("horizon").long("horizon").value_parser(value_parser!(usize)).required(true))
                .arg(Arg::new("season").long("season").value_parser(value_parser!(usize)).default_value("1")),
        )
        .subcommand(
            Command::new("bench")
                .about("Serial versus rolling inference cost")
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("FILE"))
                .arg(preset)
                .arg(
                    Arg::new("horizons")
                        .long("horizons")
                        .value_delimiter(',')
                        .value_parser(value_parser!(usize))
                        .default_value("80"),
                )
                .arg(Arg::new("reps").long("reps").value_parser(value_parser!(usize)).default_value("20")),
        )
}

fn num_arg(name: &'static str, default: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_parser(value_parser!(f64))
        .default_value(default)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Input(_) | Error::Config(_) | Error::ContextLength { .. } => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(m: &ArgMatches) -> serialcast::Result<()> {
    let seed = m.get_one::<u64>("seed").copied();
    let verbose = m.get_count("verbose");
    match m.subcommand() {
        Some(("synth", s)) => synth(s, seed.unwrap_or(0)),
        Some(("shard", s)) => shard(s, seed.unwrap_or(0)),
        Some(("stats", s)) => stats(s),
        Some(("train", s)) => train(s, seed, verbose),
        Some(("posttrain", s)) => posttrain(s, seed, verbose),
        Some(("gradcheck", _)) => gradcheck(seed.unwrap_or(0)),
        Some(("forecast", s)) => forecast_cmd(s),
        Some(("eval", s)) => eval(s),
        Some(("bench", s)) => bench(s, seed.unwrap_or(0)),
        _ => unreachable!("subcommand is required"),
    }
}

fn f(m: &ArgMatches, name: &str) -> f64 {
    *m.get_one::<f64>(name).expect("defaulted")
}

fn data_dir(m: &ArgMatches) -> serialcast::Result<PathBuf> {
    if let Some(d) = m.get_one::<String>("data") {
        return Ok(PathBuf::from(d));
    }
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Input(format!("no --data given and {DATA_DIR_ENV} is not set")))
}

fn synth(m: &ArgMatches, seed: u64) -> serialcast::Result<()> {
    let length = *m.get_one::<usize>("length").unwrap();
    let count = *m.get_one::<usize>("count").unwrap();
    let kind = m.get_one::<String>("kind").unwrap().as_str();
    let series: Vec<TimeSeriesSample> = if kind == "toy" {
        sinusoid_trend_corpus(count, length, seed)?
    } else {
        let component = match kind {
            "linear" => SignalKind::Linear {
                slope: f(m, "slope"),
                intercept: f(m, "intercept"),
            },
            "sinusoidal" => SignalKind::Sinusoidal {
                amplitude: f(m, "amplitude"),
                period: f(m, "period"),
                phase: f(m, "phase"),
            },
            "exponential" => SignalKind::Exponential {
                scale: f(m, "scale"),
                rate: f(m, "rate"),
            },
            "power" => SignalKind::Power {
                scale: f(m, "scale"),
                exponent: f(m, "exponent"),
            },
            "impulse" => SignalKind::Impulse {
                amplitude: f(m, "amplitude"),
                location: *m.get_one::<usize>("location").unwrap(),
            },
            _ => SignalKind::Step {
                amplitude: f(m, "amplitude"),
                location: *m.get_one::<usize>("location").unwrap(),
            },
        };
        let mut components = vec![component];
        let combine = match m.get_one::<String>("combine").map(String::as_str) {
            Some(op) => {
                components.push(SignalKind::Linear {
                    slope: f(m, "slope"),
                    intercept: f(m, "intercept"),
                });
                if op == "mul" {
                    Combine::Multiplicative
                } else {
                    Combine::Additive
                }
            }
            None => Combine::Additive,
        };
        (0..count)
            .map(|i| {
                gen_signal(&SignalSpec {
                    components: components.clone(),
                    combine,
                    noise_sigma: f(m, "noise_sigma"),
                    length,
                    seed: derive_seed(seed, i as u64),
                })
            })
            .collect::<serialcast::Result<_>>()?
    };
    let out = m.get_one::<String>("out").map(PathBuf::from);
    match m.get_one::<String>("format").unwrap().as_str() {
        "shard" => {
            let dir = out.ok_or_else(|| Error::Input("--format shard needs --out DIR".into()))?;
            let bytes = m.get_one::<usize>("shard_bytes").copied().unwrap_or(DEFAULT_SHARD_BYTES);
            let manifest = build_shards(series, bytes, &dir, seed)?;
            say!(
                "{} series, {} points, {} shards in {}",
                manifest.total_series(),
                manifest.total_points(),
                manifest.shards.len(),
                dir.display()
            )?;
        }
        _ => match (out, series.len()) {
            (None, 1) => write_csv(&mut io::stdout().lock(), &series[0].values)?,
            (Some(path), 1) => write_csv(&mut fs::File::create(path)?, &series[0].values)?,
            (Some(dir), _) => {
                fs::create_dir_all(&dir)?;
                for (i, s) in series.iter().enumerate() {
                    write_csv(&mut fs::File::create(dir.join(format!("series-{i:05}.csv")))?, &s.values)?;
                }
            }
            (None, _) => return Err(Error::Input("several CSV series need --out DIR".into())),
        },
    }
    Ok(())
}

fn csv_inputs(inputs: Vec<&String>) -> serialcast::Result<Vec<TimeSeriesSample>> {
    let mut files = Vec::new();
    for i in inputs {
        let p = Path::new(i);
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.to_path_buf());
        }
    }
    files.iter().map(|p| import_csv(p)).collect()
}

fn shard(m: &ArgMatches, seed: u64) -> serialcast::Result<()> {
    let series = csv_inputs(m.get_many::<String>("input").unwrap().collect())?;
    let out = match m.get_one::<String>("out") {
        Some(o) => PathBuf::from(o),
        None => data_dir(m)?,
    };
    let bytes = m.get_one::<usize>("shard_bytes").copied().unwrap_or(DEFAULT_SHARD_BYTES);
    let manifest = build_shards(series, bytes, &out, seed)?;
    say!(
        "{} series, {} points, {} shards in {}",
        manifest.total_series(),
        manifest.total_points(),
        manifest.shards.len(),
        out.display()
    )?;
    Ok(())
}

fn load_series(m: &ArgMatches) -> serialcast::Result<Vec<Vec<f64>>> {
    if let Some(inputs) = m.get_many::<String>("input") {
        return Ok(csv_inputs(inputs.collect())?.into_iter().map(|s| s.values).collect());
    }
    let dir = data_dir(m)?;
    Ok(read_all(&dir)?
        .into_iter()
        .map(|s| s.values.into_iter().map(f64::from).collect())
        .collect())
}

fn stats(m: &ArgMatches) -> serialcast::Result<()> {
    let series = load_series(m)?;
    let refs: Vec<&[f64]> = series.iter().map(Vec::as_slice).collect();
    let p = dataset_complexity(&refs)?;
    say!(
        "{{\"adf\": {}, \"forecastability\": {}, \"variates\": {}, \"degenerate_variates\": {}}}",
        json_num(p.adf),
        json_num(p.forecastability),
        series.len(),
        p.degenerate_variates
    )?;
    Ok(())
}

fn json_num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "null".into()
    }
}

/// Applies `key=value` text, then explicit flags, on top of the defaults.
fn resolve(m: &ArgMatches, model: &mut ModelConfig, train: &mut TrainConfig, seed: Option<u64>) -> serialcast::Result<()> {
    if let Some(path) = m.get_one::<String>("config") {
        let text = fs::read_to_string(path)?;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{path}: expected key=value, got '{line}'")))?;
            set_key(model, train, k.trim(), v)?;
        }
    }
    for key in ModelConfig::KEYS.iter().chain(TrainConfig::KEYS.iter()) {
        if let Some(v) = m.try_get_one::<String>(key).ok().flatten() {
            set_key(model, train, key, v)?;
        }
    }
    if let Some(s) = seed {
        train.seed = s;
    }
    model.validate()?;
    train.validate()
}

fn set_key(model: &mut ModelConfig, train: &mut TrainConfig, key: &str, value: &str) -> serialcast::Result<()> {
    if model.set(key, value)? || train.set(key, value)? {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown configuration key '{key}'")))
    }
}

fn echo(model: &ModelConfig, train: &TrainConfig) {
    eprintln!("# effective configuration");
    for (k, v) in model.entries().into_iter().chain(train.entries()) {
        eprintln!("{k}={v}");
    }
}

fn progress(verbose: u8, every: u64) -> impl FnMut(&StepReport) {
    move |r: &StepReport| {
        if verbose > 0 || (every > 0 && r.step.is_multiple_of(every)) {
            eprintln!(
                "step {:>6}  loss {:.5}  ntp {:.5}  stp {:.5}  aux {:.4}  |g| {:.3}  lr {:.2e}",
                r.step, r.loss, r.parts.ntp, r.parts.stp, r.parts.aux, r.grad_norm, r.lr
            );
        }
    }
}

fn shard_source(dir: &Path, train: &TrainConfig, stream: u64) -> serialcast::Result<Box<dyn WindowSource + Send>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, stream));
    Ok(Box::new(ShardStream::open(
        dir,
        train.queue_capacity,
        train.rotate_every,
        &mut rng,
    )?))
}

fn train(m: &ArgMatches, seed: Option<u64>, verbose: u8) -> serialcast::Result<()> {
    let mut model_cfg = match m.get_one::<String>("preset").unwrap().as_str() {
        "tiny" => ModelConfig::tiny(),
        "released" => ModelConfig::released(),
        _ => ModelConfig::desk(),
    };
    let mut train = TrainConfig::for_stage(Stage::Pretrain);
    resolve(m, &mut model_cfg, &mut train, seed)?;
    train.stage = Stage::Pretrain;
    echo(&model_cfg, &train);
    let out = PathBuf::from(m.get_one::<String>("out").unwrap());
    let data = data_dir(m)?;
    let source = shard_source(&data, &train, 2)?;
    let mut mix = serialcast::dataloader::MixtureSampler::single(source);
    let mut trainer = match m.get_one::<String>("resume") {
        Some(path) => {
            let (model, state) = load_checkpoint_for(Path::new(path), &model_cfg)?;
            match state {
                Some(s) => Trainer::resume(model, train.clone(), s)?,
                None => Trainer::new(model, train.clone())?,
            }
        }
        None => Trainer::new(Model::new(model_cfg, derive_seed(train.seed, 0))?, train.clone())?,
    };
    let history = trainer.run(&mut mix, Some(&out), &mut progress(verbose, train.log_every))?;
    if let Some(last) = history.last() {
        say!("step {} loss {:.6}", last.step + 1, last.loss)?;
    }
    say!("checkpoint {}", out.display())?;
    Ok(())
}

fn posttrain(m: &ArgMatches, seed: Option<u64>, verbose: u8) -> serialcast::Result<()> {
    let (pretrained, _) = load_checkpoint(Path::new(m.get_one::<String>("from").unwrap()))?;
    let mut model_cfg = pretrained.config.clone();
    let mut train = TrainConfig::for_stage(Stage::Posttrain);
    resolve(m, &mut model_cfg, &mut train, seed)?;
    train.stage = Stage::Posttrain;
    if model_cfg != pretrained.config {
        return Err(Error::Config(
            "model keys cannot change in post-training; use extend_n_max for the context".into(),
        ));
    }
    echo(&model_cfg, &train);
    let out = PathBuf::from(m.get_one::<String>("out").unwrap());
    let post = shard_source(&data_dir(m)?, &train, 2)?;
    let pre = shard_source(Path::new(m.get_one::<String>("revisit").unwrap()), &train, 3)?;
    let every = train.log_every;
    let run = run_posttrain(pretrained, train, post, pre, Some(&out), &mut progress(verbose, every))?;
    if let Some(last) = run.history.last() {
        say!("step {} loss {:.6}", last.step + 1, last.loss)?;
    }
    say!("checkpoint {}", out.display())?;
    Ok(())
}

fn gradcheck(seed: u64) -> serialcast::Result<()> {
    let reports = gradient_check_suite(&ModelConfig::tiny(), seed)?;
    let mut out = io::stdout().lock();
    for r in &reports {
        writeln!(
            out,
            "{:<24} max_rel {:.3e}  max_abs {:.3e}  {}",
            r.param_name,
            r.max_rel_err,
            r.max_abs_err,
            if r.passed { "ok" } else { "FAIL" }
        )?;
    }
    let worst: Option<&GradCheckReport> = reports
        .iter()
        .filter(|r| !r.passed)
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
    match worst {
        Some(w) => Err(Error::Numeric(format!(
            "gradient check failed; worst family {} (max_rel {:.3e})",
            w.param_name, w.max_rel_err
        ))),
        None => Ok(()),
    }
}

fn forecast_cmd(m: &ArgMatches) -> serialcast::Result<()> {
    let (model, _) = load_checkpoint(Path::new(m.get_one::<String>("checkpoint").unwrap()))?;
    let series = import_csv(Path::new(m.get_one::<String>("input").unwrap()))?;
    let horizon = *m.get_one::<usize>("horizon").unwrap();
    let opts = ForecastOptions {
        sort_quantiles: m.get_flag("sort_quantiles"),
    };
    let dist = match m.get_one::<String>("mode").unwrap().as_str() {
        "rolling" => forecast_rolling_ntp(&model, &series.values, horizon, opts)?,
        _ => forecast(&model, &series.values, horizon, opts)?,
    };
    let mut text = String::from("step");
    for q in &dist.levels {
        text += &format!(",q{q}");
    }
    text.push('\n');
    for t in 0..horizon {
        text += &t.to_string();
        for q in 0..dist.levels.len() {
            text += &format!(",{}", dist.level(q)[t]);
        }
        text.push('\n');
    }
    match m.get_one::<String>("out") {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn eval(m: &ArgMatches) -> serialcast::Result<()> {
    let (model, _) = load_checkpoint(Path::new(m.get_one::<String>("checkpoint").unwrap()))?;
    let series = load_series(m)?;
    let report = evaluate(
        &model,
        &series,
        *m.get_one::<usize>("horizon").unwrap(),
        *m.get_one::<usize>("season").unwrap(),
    )?;
    say!("{}", report.to_json())?;
    Ok(())
}

fn bench(m: &ArgMatches, seed: u64) -> serialcast::Result<()> {
    let model = match m.get_one::<String>("checkpoint") {
        Some(path) => load_checkpoint(Path::new(path))?.0,
        None => {
            let cfg = match m.get_one::<String>("preset").unwrap().as_str() {
                "tiny" => ModelConfig::tiny(),
                "released" => ModelConfig::released(),
                _ => ModelConfig::desk(),
            };
            Model::new(cfg, derive_seed(seed, 0))?
        }
    };
    let horizons: Vec<usize> = m.get_many::<usize>("horizons").unwrap().copied().collect();
    let rows = bench_inference(&model, &horizons, *m.get_one::<usize>("reps").unwrap(), seed)?;
    for r in rows {
        say!(
            "F={:<5} blocks serial {:>4} rolling {:>4} (x{:.2})  passes {} / {}  p50 ms {:.2} / {:.2} (x{:.2})",
            r.horizon,
            r.serial_blocks,
            r.rolling_blocks,
            r.block_ratio(),
            r.serial_passes,
            r.rolling_passes,
            r.serial_ms_p50,
            r.rolling_ms_p50,
            r.wall_ratio()
        )?;
    }
    Ok(())
}

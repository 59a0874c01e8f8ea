//! `cachelab`: run policy inference, leader location, the AES and RSA
//! attacks, detectability telemetry and trace replay from the shell.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cachelab::attack::{write_samples_csv, ReloadStyle, Technique};
use cachelab::error::{ConfigError, Error};
use cachelab::experiment::{
    infer_policies, locate_leaders, random_key, AesCampaign, ExperimentKind, Manifest, NoiseSpec,
    PolicyInference, RsaCampaign, RsaPacing, ATTACKER_CORE, NOISE_CORE, SERIES_PERIOD, VICTIM_CORE,
};
use cachelab::infer::SliceLeaders;
use cachelab::replay::{replay, write_trace};
use cachelab::telemetry::{write_series_csv, Histogram, Metadata, Scenario, Summary};
use cachelab::victim::rsa::format_bits;
use cachelab::{InsertionMode, MachineProfile, PolicyKind};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Exit statuses, one per failure class.
mod exit {
    pub const USAGE: u8 = 2;
    pub const PROFILE: u8 = 3;
    pub const OUTPUT: u8 = 4;
    pub const REPLAY: u8 = 5;
    pub const RUN: u8 = 6;
    pub const MISMATCH: u8 = 7;
}

#[derive(Parser)]
#[command(
    name = "cachelab",
    version,
    about = "Cache replacement-policy side-channel laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score replacement-policy models against a simulated machine.
    PolicyInfer {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Timing noise in cycles, uniform in [-jitter, +jitter].
        #[arg(long, default_value_t = 0)]
        jitter: u64,
        /// Machine LLC policy, replacing the profile's insertion mode.
        #[arg(long, value_parser = parse_policy)]
        machine_policy: Option<PolicyKind>,
    },
    /// Find the leader sets of a set-dueling LLC.
    LeaderLocate {
        #[command(flatten)]
        common: Common,
    },
    /// Recover an AES key from the last round's table lookups.
    AttackAes {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackArgs,
        /// Encryptions to observe.
        #[arg(long, default_value_t = 20_000)]
        samples: u64,
        /// Key as 32 hex digits; drawn from the seed when absent.
        #[arg(long, value_parser = parse_key)]
        key: Option<[u8; 16]>,
        /// Lines a third party touches in each monitored set.
        #[arg(long)]
        noise: Option<usize>,
        /// Chance the third party is active in a window.
        #[arg(long, default_value_t = 0.5)]
        noise_probability: f64,
        /// Put the target second in the set so noise evicts the attacker's line.
        #[arg(long)]
        noise_tolerant: bool,
        /// Write a replayable access trace.
        #[arg(long)]
        trace: bool,
    },
    /// Recover an RSA exponent from multiply detections.
    AttackRsa {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long, default_value_t = 2048)]
        bits: usize,
        /// Cycles between attacker rounds.
        #[arg(long, default_value_t = 3000)]
        period: u64,
        #[arg(long, value_enum, default_value_t = PacingArg::Cadence)]
        pacing: PacingArg,
        #[arg(long)]
        trace: bool,
    },
    /// Victim miss statistics with and without each attack.
    Telemetry {
        #[command(flatten)]
        common: Common,
        /// AES encryptions per scenario.
        #[arg(long, default_value_t = 10_000)]
        samples: u64,
        /// RSA exponent length.
        #[arg(long, default_value_t = 2048)]
        bits: usize,
    },
    /// Re-simulate a trace and compare its final state digest.
    Replay { trace: PathBuf },
}

#[derive(Args)]
struct Common {
    /// Built-in name, file in $CACHELAB_PROFILE_DIR, or path to a .toml file.
    #[arg(long, default_value = "i5-7600K")]
    profile: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// LLC insertion mode, overriding the profile.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Run directory; defaults to cachelab-runs/<experiment>-<seed>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, value_enum, default_value_t = TechniqueArg::Rr)]
    technique: TechniqueArg,
    /// How RELOAD+REFRESH reloads the target.
    #[arg(long, value_enum)]
    reload: Option<ReloadArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Duel,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TechniqueArg {
    Rr,
    Fr,
    Pp,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReloadArg {
    Verbatim,
    Conditional,
}

#[derive(Clone, Copy, ValueEnum)]
enum PacingArg {
    Cadence,
    Gap,
}

impl From<TechniqueArg> for Technique {
    fn from(t: TechniqueArg) -> Self {
        match t {
            TechniqueArg::Rr => Technique::ReloadRefresh,
            TechniqueArg::Fr => Technique::FlushReload,
            TechniqueArg::Pp => Technique::PrimeProbe,
        }
    }
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    s.parse().map_err(|e: ConfigError| e.to_string())
}

fn parse_key(s: &str) -> Result<[u8; 16], String> {
    let bytes = hex::decode(s).map_err(|e| e.to_string())?;
    bytes
        .try_into()
        .map_err(|_| "key must be 16 bytes (32 hex digits)".to_string())
}

/// An error with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl ToString) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(
                ConfigError::UnknownProfile(_)
                | ConfigError::InvalidProfile { .. }
                | ConfigError::Parse { .. },
            ) => exit::PROFILE,
            Error::Config(_) => exit::USAGE,
            Error::Output(_) => exit::OUTPUT,
            Error::Replay(_) => exit::REPLAY,
            Error::Sim(_) | Error::Inference(_) => exit::RUN,
        };
        Failure::new(code, e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Output directory of one run. The manifest goes in first.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    fn create(common: &Common, manifest: &Manifest, kind: &str) -> CliResult<Self> {
        let path = common.out.clone().unwrap_or_else(|| {
            PathBuf::from("cachelab-runs").join(format!("{kind}-{}", common.seed))
        });
        fs::create_dir_all(&path).map_err(|e| output_error(&path, e))?;
        let dir = Self { path };
        dir.write_json("manifest.json", manifest)?;
        Ok(dir)
    }

    fn file(&self, name: &str) -> CliResult<BufWriter<File>> {
        let p = self.path.join(name);
        File::create(&p)
            .map(BufWriter::new)
            .map_err(|e| output_error(&p, e))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult {
        let mut f = self.file(name)?;
        serde_json::to_writer_pretty(&mut f, value).map_err(|e| Failure::new(exit::OUTPUT, e))?;
        writeln!(f)
            .and_then(|_| f.flush())
            .map_err(|e| output_error(&self.path.join(name), e))
    }

    fn write_with<E: std::fmt::Display>(
        &self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> Result<(), E>,
    ) -> CliResult {
        let mut f = self.file(name)?;
        body(&mut f).map_err(|e| Failure::new(exit::OUTPUT, format!("{name}: {e}")))?;
        f.flush()
            .map_err(|e| output_error(&self.path.join(name), e))
    }
}

fn output_error(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new(
        exit::OUTPUT,
        format!("cannot write {}: {e}", path.display()),
    )
}

fn load_profile(common: &Common) -> CliResult<MachineProfile> {
    let mut profile = MachineProfile::load(&common.profile)?;
    if let Some(mode) = common.mode {
        profile = profile.with_insertion_mode(match mode {
            ModeArg::One => InsertionMode::Mode1Fixed,
            ModeArg::Two => InsertionMode::Mode2Fixed,
            ModeArg::Duel => InsertionMode::SetDueling,
        });
    }
    Ok(profile)
}

fn mode_label(profile: &MachineProfile) -> String {
    profile.llc_policy_kind().name().to_string()
}

fn percent(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn policy_infer(
    common: Common,
    trials: usize,
    jitter: u64,
    machine_policy: Option<PolicyKind>,
) -> CliResult {
    let mut profile = load_profile(&common)?;
    if let Some(kind) = machine_policy {
        profile = profile.with_llc_policy(kind);
    }
    let manifest = Manifest::new(ExperimentKind::PolicyInfer, &profile, common.seed)
        .with("trials", trials)
        .with("jitter", jitter)
        .with("machine_policy", mode_label(&profile));
    let dir = RunDir::create(&common, &manifest, "policy-infer")?;
    let cfg = PolicyInference {
        trials,
        seed: common.seed,
        jitter,
        ..PolicyInference::default()
    };
    let rows = infer_policies(&profile, &PolicyKind::ALL, &cfg)?;
    println!(
        "machine {} ({}), {trials} trials",
        profile.name,
        mode_label(&profile)
    );
    println!("{:<18} {:>8} {:>9}", "model", "accuracy", "discarded");
    for r in &rows {
        println!(
            "{:<18} {:>8.3} {:>9}",
            r.model.name(),
            r.score.accuracy(),
            r.score.discarded
        );
    }
    dir.write_with("accuracy.csv", |f| {
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["model", "trials", "correct", "discarded", "accuracy"])?;
        for r in &rows {
            w.write_record([
                r.model.name().to_string(),
                r.score.trials.to_string(),
                r.score.correct.to_string(),
                r.score.discarded.to_string(),
                format!("{:.4}", r.score.accuracy()),
            ])?;
        }
        w.flush().map_err(csv::Error::from)
    })
}

fn leader_locate(common: Common) -> CliResult {
    let profile = load_profile(&common)?;
    let manifest = Manifest::new(ExperimentKind::LeaderLocate, &profile, common.seed);
    let dir = RunDir::create(&common, &manifest, "leader-locate")?;
    let map = locate_leaders(&profile, common.seed)?;
    if map.is_empty() {
        println!("no dueling detected on {}", profile.name);
    }
    for (i, s) in map.slices.iter().enumerate() {
        let show = |v: &[u32]| {
            SliceLeaders::regions(v)
                .iter()
                .map(|(a, b)| format!("{a}..{b}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        println!(
            "slice {i}: first [{}] second [{}]",
            show(&s.first),
            show(&s.second)
        );
    }
    dir.write_json("leaders.json", &map)
}

#[allow(clippy::too_many_arguments)]
fn attack_aes(
    common: Common,
    attack: AttackArgs,
    samples: u64,
    key: Option<[u8; 16]>,
    noise: Option<usize>,
    noise_probability: f64,
    noise_tolerant: bool,
    trace: bool,
) -> CliResult {
    let profile = load_profile(&common)?;
    let technique = Technique::from(attack.technique);
    let key = key.unwrap_or_else(|| random_key(common.seed));
    if !(0.0..=1.0).contains(&noise_probability) {
        return Err(Failure::new(
            exit::USAGE,
            "--noise-probability must lie in [0, 1]",
        ));
    }
    let mut manifest = Manifest::new(ExperimentKind::AttackAes, &profile, common.seed)
        .with("technique", technique)
        .with("samples", samples)
        .with("key", hex::encode(key))
        .with("noise_tolerant", noise_tolerant);
    if let Some(k) = noise {
        manifest = manifest
            .with("noise", k)
            .with("noise_probability", noise_probability);
    }
    if let Some(r) = attack.reload {
        manifest = manifest.with(
            "reload",
            format!("{:?}", ReloadStyle::from(r)).to_lowercase(),
        );
    }
    let dir = RunDir::create(&common, &manifest, "attack-aes")?;

    let mut c = AesCampaign::new(
        profile.clone(),
        Scenario::Attack(technique),
        samples,
        key,
        common.seed,
    );
    c.reload_style = attack.reload.map(ReloadStyle::from).unwrap_or_default();
    c.target_slot = noise_tolerant as usize;
    c.noise = noise.map(|lines| NoiseSpec {
        lines,
        probability: noise_probability,
    });
    c.trace = trace;
    let outcome = c.run()?;
    let state = outcome.recover(&c.monitored, samples as usize);
    let recovered = state.recovered_key();

    println!(
        "technique {} on {}, {samples} encryptions",
        technique.table_name(),
        profile.name
    );
    println!("planted   {}", hex::encode(key));
    println!(
        "recovered {}",
        recovered.map_or_else(|| "(ambiguous)".to_string(), hex::encode)
    );
    println!(
        "verdict accuracy {}",
        percent(outcome.verdict_accuracy(&c.monitored))
    );

    dir.write_with("samples.csv", |f| write_samples_csv(&outcome.samples, f))?;
    dir.write_with("scores.csv", |f| state.write_scores_csv(f))?;
    #[derive(Serialize)]
    struct Report {
        planted: String,
        recovered: Option<String>,
        success: bool,
        verdict_accuracy: f64,
        thresholds: Option<cachelab::attack::Thresholds>,
        victim_misses: Summary,
        digest: String,
    }
    dir.write_json(
        "recovery.json",
        &Report {
            planted: hex::encode(key),
            recovered: recovered.map(hex::encode),
            success: recovered == Some(key),
            verdict_accuracy: outcome.verdict_accuracy(&c.monitored),
            thresholds: outcome.thresholds,
            victim_misses: Summary::new(&outcome.misses(0), &outcome.cycles(0)),
            digest: outcome.digest.clone(),
        },
    )?;
    if trace {
        let mut cores = vec![VICTIM_CORE, ATTACKER_CORE];
        if c.noise.is_some() {
            cores.push(NOISE_CORE);
        }
        dir.write_with("trace.jsonl", |f| {
            write_trace(
                f,
                &profile,
                common.seed,
                &cores,
                &outcome.report.trace,
                &outcome.digest,
            )
        })?;
    }
    Ok(())
}

impl From<ReloadArg> for ReloadStyle {
    fn from(r: ReloadArg) -> Self {
        match r {
            ReloadArg::Verbatim => ReloadStyle::Verbatim,
            ReloadArg::Conditional => ReloadStyle::Conditional,
        }
    }
}

fn attack_rsa(
    common: Common,
    attack: AttackArgs,
    bits: usize,
    period: u64,
    pacing: PacingArg,
    trace: bool,
) -> CliResult {
    let profile = load_profile(&common)?;
    let technique = Technique::from(attack.technique);
    if bits == 0 {
        return Err(Failure::new(exit::USAGE, "--bits must be positive"));
    }
    let mut c = RsaCampaign::new(
        profile.clone(),
        Scenario::Attack(technique),
        bits,
        common.seed,
    );
    c.sampling_period = period;
    c.pacing = match pacing {
        PacingArg::Cadence => RsaPacing::Cadence,
        PacingArg::Gap => RsaPacing::Gap,
    };
    if let Some(r) = attack.reload {
        c.reload_style = r.into();
    }
    c.trace = trace;
    let manifest = Manifest::new(ExperimentKind::AttackRsa, &profile, common.seed)
        .with("technique", technique)
        .with("bits", bits)
        .with("period", period)
        .with("pacing", format!("{:?}", c.pacing).to_lowercase())
        .with("reload", format!("{:?}", c.reload_style).to_lowercase());
    let dir = RunDir::create(&common, &manifest, "attack-rsa")?;
    let outcome = c.run()?;
    let rec = outcome.recover();
    if let Some(w) = &rec.warning {
        eprintln!("warning: {w}");
    }
    let name = technique.table_name();
    println!("{:<16} | {name:>7}", "Attack");
    println!(
        "{:<16} | {:>7}",
        "True positives",
        percent(rec.stats.true_positive_rate())
    );
    println!(
        "{:<16} | {:>7}",
        "False positives",
        percent(rec.stats.false_positive_rate())
    );
    println!("exponent bits recovered {}", percent(rec.bit_accuracy));

    dir.write_with("samples.csv", |f| write_samples_csv(&outcome.samples, f))?;
    #[derive(Serialize)]
    struct Report<'a> {
        technique: &'a str,
        exponent: String,
        recovered: String,
        bit_accuracy: f64,
        true_positive_rate: f64,
        false_positive_rate: f64,
        stats: cachelab::victim::rsa::MultiplyStats,
        warning: Option<String>,
        digest: String,
    }
    dir.write_json(
        "recovery.json",
        &Report {
            technique: name,
            exponent: format_bits(&outcome.exponent),
            recovered: format_bits(&rec.bits),
            bit_accuracy: rec.bit_accuracy,
            true_positive_rate: rec.stats.true_positive_rate(),
            false_positive_rate: rec.stats.false_positive_rate(),
            stats: rec.stats,
            warning: rec.warning.clone(),
            digest: outcome.digest.clone(),
        },
    )?;
    if trace {
        dir.write_with("trace.jsonl", |f| {
            write_trace(
                f,
                &profile,
                common.seed,
                &[VICTIM_CORE, ATTACKER_CORE],
                &outcome.report.trace,
                &outcome.digest,
            )
        })?;
    }
    Ok(())
}

/// Encryptions skipped before counting, while the tables warm up.
const AES_WARMUP: usize = 10;
const CYCLE_BIN: u64 = 50;

fn telemetry(common: Common, samples: u64, bits: usize) -> CliResult {
    let profile = load_profile(&common)?;
    let manifest = Manifest::new(ExperimentKind::Telemetry, &profile, common.seed)
        .with("samples", samples)
        .with("bits", bits)
        .with("series_period", SERIES_PERIOD);
    let dir = RunDir::create(&common, &manifest, "telemetry")?;
    let key = random_key(common.seed);
    #[derive(Serialize)]
    struct Row {
        scenario: String,
        aes: Summary,
        rsa_total_misses: usize,
        rsa_steady_mean: f64,
    }
    let mut rows = Vec::new();
    println!(
        "{:<6} {:>10} {:>12} {:>12} {:>12}",
        "", "AES zero", "AES misses", "RSA misses", "RSA steady"
    );
    for scenario in Scenario::ALL {
        let label = scenario.label();
        let aes = AesCampaign::new(profile.clone(), scenario, samples, key, common.seed).run()?;
        let misses = aes.misses(AES_WARMUP);
        let cycles = aes.cycles(AES_WARMUP);
        let summary = Summary::new(&misses, &cycles);
        dir.write_with(&format!("aes_misses_{label}.csv"), |f| {
            Histogram::new(&misses, 1).write_csv(f)
        })?;
        dir.write_with(&format!("aes_cycles_{label}.csv"), |f| {
            Histogram::new(&cycles, CYCLE_BIN).write_csv(f)
        })?;

        let mut rsa = RsaCampaign::new(profile.clone(), scenario, bits, common.seed);
        rsa.pacing = RsaPacing::Gap;
        let rsa = rsa.run()?;
        let series = rsa.miss_series();
        dir.write_with(&format!("rsa_series_{label}.csv"), |f| {
            write_series_csv(&series, SERIES_PERIOD, f)
        })?;
        dir.write_json(
            &format!("rsa_series_{label}.meta.json"),
            &Metadata {
                scenario: label.into(),
                seed: common.seed,
                profile: profile.name.clone(),
                description: format!(
                    "victim LLC misses per {SERIES_PERIOD} cycles during one {bits}-bit decryption"
                ),
            },
        )?;
        let row = Row {
            scenario: label.into(),
            aes: summary,
            rsa_total_misses: rsa.report.agents[0].miss_times.len(),
            rsa_steady_mean: rsa.steady_mean(),
        };
        println!(
            "{:<6} {:>10} {:>12.3} {:>12} {:>12.3}",
            label,
            percent(row.aes.zero_fraction),
            row.aes.mean_misses,
            row.rsa_total_misses,
            row.rsa_steady_mean
        );
        rows.push(row);
    }
    dir.write_json("summary.json", &rows)
}

fn replay_trace(path: &Path) -> CliResult {
    let file = File::open(path)
        .map_err(|e| Failure::new(exit::REPLAY, format!("{}: {e}", path.display())))?;
    let outcome = replay(BufReader::new(file)).map_err(Error::from)?;
    println!("events   {}", outcome.events);
    println!("recorded {}", outcome.recorded);
    println!("replayed {}", outcome.replayed);
    if outcome.matches() {
        println!("digests match");
        Ok(())
    } else {
        Err(Failure::new(exit::MISMATCH, "digests differ"))
    }
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::PolicyInfer {
            common,
            trials,
            jitter,
            machine_policy,
        } => policy_infer(common, trials, jitter, machine_policy),
        Command::LeaderLocate { common } => leader_locate(common),
        Command::AttackAes {
            common,
            attack,
            samples,
            key,
            noise,
            noise_probability,
            noise_tolerant,
            trace,
        } => attack_aes(
            common,
            attack,
            samples,
            key,
            noise,
            noise_probability,
            noise_tolerant,
            trace,
        ),
        Command::AttackRsa {
            common,
            attack,
            bits,
            period,
            pacing,
            trace,
        } => attack_rsa(common, attack, bits, period, pacing, trace),
        Command::Telemetry {
            common,
            samples,
            bits,
        } => telemetry(common, samples, bits),
        Command::Replay { trace } => replay_trace(&trace),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

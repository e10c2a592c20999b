//! Subcommands: file I/O, exit codes and the printed summaries around
//! [`crate::stages`].

use std::io::Write;
use std::path::{Path, PathBuf};

use uap_sentinel_core::attack::{target_rate, PerturbationBank};
use uap_sentinel_core::baseline::{LinearDetector, PcaDetector, PcaModel};
use uap_sentinel_core::classifier::MlpClassifier;
use uap_sentinel_core::data::{load_dataset, save_dataset, ImageDataset};
use uap_sentinel_core::detector::{glrt_score, DetectorParams};
use uap_sentinel_core::eval::Detector;
use uap_sentinel_core::Error;

use crate::config::{RunConfig, Split};
use crate::model_file::{Model, ModelFile, ModelFileError};
use crate::stages;

/// File names inside the output directory.
pub mod files {
    pub const MANIFEST: &str = "manifest.json";
    pub const CLASSIFIER: &str = "classifier.json";
    pub const BANK: &str = "bank.json";
    /// LO-GLRT detector with the fine-tuned threshold.
    pub const DETECTOR: &str = "detector.json";
    /// The same detector with the Neyman-Pearson threshold.
    pub const DETECTOR_NP: &str = "detector-np.json";
    pub const PCA: &str = "pca.json";
    pub const LINEAR: &str = "linear.json";

    pub fn dataset(split: crate::config::Split) -> String {
        format!("{}.uapd", split.name())
    }

    pub fn report_json(detector: &str) -> String {
        format!("report-{detector}.json")
    }

    pub fn report_csv(detector: &str) -> String {
        format!("report-{detector}.csv")
    }
}

/// Detector names used in reports.
pub mod names {
    pub const LO_GLRT: &str = "lo-glrt";
    pub const LO_GLRT_NP: &str = "lo-glrt-np";
    pub const PCA: &str = "pca";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    TrainClassifier,
    GenUaps,
    TrainDetector,
    Calibrate,
    TrainBaseline,
    Eval,
    Pipeline,
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub strict: bool,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Missing(PathBuf),
    NonConvergence(String),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Missing(_) => 4,
            CliError::NonConvergence(_) => 5,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Missing(p) => write!(
                f,
                "missing prerequisite {} (run the earlier stage first)",
                p.display()
            ),
            CliError::NonConvergence(m) => write!(f, "did not converge: {m}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::BadMagic(_) | Error::CorruptHeader(_) => {
                CliError::Io(e.to_string())
            }
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<ModelFileError> for CliError {
    fn from(e: ModelFileError) -> Self {
        match e {
            ModelFileError::Missing(p) => CliError::Missing(p),
            other => CliError::Io(other.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Loads the configuration (or the defaults) and applies the overrides.
pub fn resolve_config(opts: &Options) -> CliResult<RunConfig> {
    let mut cfg = match &opts.config {
        Some(path) => RunConfig::load(path).map_err(CliError::Config)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

/// Runs one subcommand, writing its summary to `log`.
pub fn run(cmd: Command, opts: &Options, log: &mut dyn Write) -> CliResult {
    let cfg = resolve_config(opts)?;
    let ctx = Context {
        cfg: &cfg,
        dir: &cfg.out_dir,
        strict: opts.strict,
    };
    match cmd {
        Command::Synth => ctx.synth(log),
        Command::TrainClassifier => ctx.train_classifier(log),
        Command::GenUaps => ctx.gen_uaps(log),
        Command::TrainDetector => ctx.train_detector(log),
        Command::Calibrate => ctx.calibrate(log),
        Command::TrainBaseline => ctx.train_baseline(log),
        Command::Eval => ctx.eval(log),
        Command::Pipeline => {
            ctx.synth(log)?;
            ctx.train_classifier(log)?;
            ctx.gen_uaps(log)?;
            ctx.train_detector(log)?;
            ctx.calibrate(log)?;
            ctx.train_baseline(log)?;
            ctx.eval(log)
        }
    }
}

struct Context<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    strict: bool,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn say(log: &mut dyn Write, line: std::fmt::Arguments<'_>) -> CliResult {
    writeln!(log, "{line}").map_err(|e| CliError::Io(format!("writing summary: {e}")))
}

macro_rules! say {
    ($log:expr, $($arg:tt)*) => {
        say($log, format_args!($($arg)*))
    };
}

impl Context<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> CliResult {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| io_err(&path, e))
    }

    fn save(&self, name: &str, model: Model) -> CliResult {
        self.write(name, &ModelFile::new(model).to_json())
    }

    fn load(&self, name: &str) -> CliResult<Model> {
        Ok(ModelFile::load(&self.path(name))?.model)
    }

    fn dataset(&self, split: Split) -> CliResult<ImageDataset> {
        let path = self.path(&files::dataset(split));
        if !path.exists() {
            return Err(CliError::Missing(path));
        }
        Ok(load_dataset(&path)?)
    }

    fn classifier(&self) -> CliResult<MlpClassifier> {
        match self.load(files::CLASSIFIER)? {
            Model::Classifier(m) => Ok(m),
            other => Err(wrong_kind(files::CLASSIFIER, "classifier", &other)),
        }
    }

    fn bank(&self) -> CliResult<PerturbationBank> {
        match self.load(files::BANK)? {
            Model::Bank(m) => Ok(m),
            other => Err(wrong_kind(files::BANK, "bank", &other)),
        }
    }

    fn detector(&self, name: &str) -> CliResult<DetectorParams> {
        match self.load(name)? {
            Model::Detector(m) => Ok(m),
            other => Err(wrong_kind(name, "detector", &other)),
        }
    }

    fn pca(&self) -> CliResult<PcaModel> {
        match self.load(files::PCA)? {
            Model::Pca(m) => Ok(m),
            other => Err(wrong_kind(files::PCA, "pca", &other)),
        }
    }

    fn linear(&self) -> CliResult<LinearDetector> {
        match self.load(files::LINEAR)? {
            Model::Linear(m) => Ok(m),
            other => Err(wrong_kind(files::LINEAR, "linear", &other)),
        }
    }

    fn synth(&self, log: &mut dyn Write) -> CliResult {
        std::fs::create_dir_all(self.dir).map_err(|e| io_err(self.dir, e))?;
        let mut entries = Vec::new();
        for split in Split::ALL {
            let ds = stages::synth_split(self.cfg, split)?;
            let name = files::dataset(split);
            let path = self.path(&name);
            save_dataset(&ds, &path)?;
            say!(log, "synth: wrote {} ({} images)", path.display(), ds.len())?;
            entries.push(serde_json::json!({
                "split": split.name(),
                "file": name,
                "images": ds.len(),
            }));
        }
        let shape = self.cfg.shape();
        let manifest = serde_json::json!({
            "seed": self.cfg.seed,
            "num_classes": self.cfg.dataset.num_classes,
            "shape": [shape.channels, shape.height, shape.width],
            "class_separation": self.cfg.dataset.class_separation,
            "noise_sd": self.cfg.dataset.noise_sd,
            "splits": entries,
        });
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        self.write(files::MANIFEST, &text)
    }

    fn train_classifier(&self, log: &mut dyn Write) -> CliResult {
        let train = self.dataset(Split::Train)?;
        let test = self.dataset(Split::Test)?;
        let clf = stages::classifier(self.cfg, &train)?;
        say!(
            log,
            "train-classifier: final train loss {:.6}, train accuracy {:.4}, test accuracy {:.4}",
            clf.final_train_loss().unwrap_or(f64::NAN),
            clf.accuracy(&train)?,
            clf.accuracy(&test)?
        )?;
        self.save(files::CLASSIFIER, Model::Classifier(clf))
    }

    fn gen_uaps(&self, log: &mut dyn Write) -> CliResult {
        let clf = self.classifier()?;
        let train = self.dataset(Split::Train)?;
        let test = self.dataset(Split::Test)?;
        let outcome = stages::uaps(self.cfg, &clf, &train)?;
        let bank = &outcome.bank;
        say!(
            log,
            "gen-uaps: xi {:.6}, {} epochs, converged {}",
            bank.xi(),
            outcome.epochs_run,
            outcome.converged
        )?;
        for t in 0..bank.num_classes() {
            let rates = (0..bank.per_class())
                .map(|k| target_rate(&clf, &test, bank.get(t, k), t, 1.0))
                .collect::<Result<Vec<_>, _>>()?;
            let shown: Vec<String> = rates.iter().map(|r| format!("{r:.4}")).collect();
            say!(log, "  target {t}: test target rate [{}]", shown.join(", "))?;
        }
        self.save(files::BANK, Model::Bank(outcome.bank.clone()))?;
        if self.strict && !outcome.converged {
            return Err(CliError::NonConvergence(format!(
                "targeted UAPs missed the goal {} after {} epochs",
                self.cfg.attack.target_rate_goal, outcome.epochs_run
            )));
        }
        Ok(())
    }

    fn train_detector(&self, log: &mut dyn Write) -> CliResult {
        let train = self.dataset(Split::Train)?;
        let bank = self.bank()?;
        let outcome = stages::detector(self.cfg, &train, &bank)?;
        say!(
            log,
            "train-detector: BCE loss {:.6} -> {:.6}, tau {:.6}",
            outcome.initial_loss,
            outcome.final_loss,
            outcome.params.tau
        )?;
        self.save(files::DETECTOR, Model::Detector(outcome.params))
    }

    fn calibrate(&self, log: &mut dyn Write) -> CliResult {
        let params = self.detector(files::DETECTOR)?;
        let calib = self.dataset(Split::Calib)?;
        let calibrated = stages::calibrate(self.cfg, &params, &calib)?;
        let alpha = self.cfg.detector.alpha;
        let rank = uap_sentinel_core::numerics::empirical_quantile(
            &(1..=calib.len()).map(|i| i as f64).collect::<Vec<_>>(),
            1.0 - alpha,
        )?;
        let flagged = calib
            .images()
            .iter()
            .map(|img| glrt_score(&calibrated, img).map(|s| s.0 >= calibrated.tau))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|&f| f)
            .count();
        say!(
            log,
            "calibrate: tau {:.6} = {:.4} quantile of {} clean scores (order statistic {}), calibration P_F {:.4}",
            calibrated.tau,
            1.0 - alpha,
            calib.len(),
            rank,
            flagged as f64 / calib.len() as f64
        )?;
        self.save(files::DETECTOR_NP, Model::Detector(calibrated))
    }

    fn train_baseline(&self, log: &mut dyn Write) -> CliResult {
        let train = self.dataset(Split::Train)?;
        let bank = self.bank()?;
        let (det, outcome) = stages::baseline(self.cfg, &train, &bank)?;
        say!(
            log,
            "train-baseline: {} components, logistic loss {:.6} -> {:.6}",
            det.pca.k(),
            outcome.initial_loss,
            outcome.final_loss
        )?;
        self.save(files::PCA, Model::Pca(det.pca))?;
        self.save(files::LINEAR, Model::Linear(det.linear))
    }

    fn eval(&self, log: &mut dyn Write) -> CliResult {
        let clf = self.classifier()?;
        let bank = self.bank()?;
        let bce = self.detector(files::DETECTOR)?;
        let np = self.detector(files::DETECTOR_NP)?;
        let pca = PcaDetector {
            pca: self.pca()?,
            linear: self.linear()?,
        };
        let test = self.dataset(Split::Test)?;
        let detectors: [(&str, &dyn Detector); 3] = [
            (names::LO_GLRT, &bce),
            (names::LO_GLRT_NP, &np),
            (names::PCA, &pca),
        ];
        let reports = stages::evaluate(self.cfg, &clf, &detectors, &test, &bank)?;
        for report in &reports {
            let mut json = serde_json::to_string_pretty(report).expect("reports serialize");
            json.push('\n');
            self.write(&files::report_json(&report.detector), &json)?;
            self.write(&files::report_csv(&report.detector), &report.to_csv())?;
            let last = report.rows.last().expect("non-empty grid");
            say!(
                log,
                "eval {:<10}: mixed accuracy {:.4} at eps {}, P_F {:.4}, P_D {:.4} and P_su {:.4} at eps {}",
                report.detector,
                report.mixed_accuracy,
                report.mixed_eps,
                last.p_f,
                last.p_d,
                last.p_su,
                last.eps
            )?;
        }
        Ok(())
    }
}

fn wrong_kind(file: &str, expected: &str, got: &Model) -> CliError {
    CliError::Io(format!(
        "{file}: expected a {expected} model, found {}",
        got.kind()
    ))
}

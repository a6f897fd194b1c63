//! Batch experiment harness behind the `cdiff` binary.

use std::path::Path;

use cdiff_core::config::ExperimentConfig;
use cdiff_core::data::Source;
use cdiff_core::trainer::Pipeline;
use cdiff_core::Error;

pub mod oracle;
pub mod record;
pub mod sweep;
pub mod train;
pub mod visualize;

pub use record::ExperimentRecord;

/// Resolved config echoed into every training output directory.
pub const CONFIG_ECHO: &str = "config.toml";

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit status for an error returned by a command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::NonFinite { .. }) => EXIT_NUMERIC,
        Some(
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::InvalidSchedule(_)
            | Error::InvalidCoefficients(_)
            | Error::UnregisteredCbr { .. }
            | Error::CbrExceedsTrained { .. },
        ) => EXIT_CONFIG,
        Some(e) if e.is_data_error() => EXIT_DATA,
        _ => EXIT_FAILURE,
    }
}

/// Start from a config file or a preset, then apply `key=value` overrides.
pub fn resolve_config(
    config: Option<&Path>,
    preset: Option<&str>,
    overrides: &[String],
) -> cdiff_core::Result<ExperimentConfig> {
    let base = match (config, preset) {
        (Some(_), Some(_)) => return Err(Error::Config("pass either --config or --preset, not both".into())),
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::preset("smoke")?,
    };
    base.with_overrides(overrides)
}

/// Load the config echo of a training run, with overrides.
pub fn checkpoint_config(dir: &Path, overrides: &[String]) -> cdiff_core::Result<ExperimentConfig> {
    let path = dir.join(CONFIG_ECHO);
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("{} has no {CONFIG_ECHO}", dir.display())));
    }
    ExperimentConfig::load(&path)?.with_overrides(overrides)
}

pub fn pipeline_name(p: Pipeline) -> &'static str {
    match p {
        Pipeline::Cdiff => "cdiff",
        Pipeline::Ae => "ae",
        Pipeline::Vae => "vae",
    }
}

pub fn source_name(s: Source) -> &'static str {
    match s {
        Source::Mnist => "mnist",
        Source::Cifar10 => "cifar10",
        Source::Synthetic => "synthetic",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let code = |e: Error| exit_code(&anyhow::Error::new(e));
        assert_eq!(code(Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(code(Error::Dataset("x".into())), EXIT_DATA);
        assert_eq!(code(Error::BadMagic { found: 1, expected: 2051 }), EXIT_DATA);
        assert_eq!(
            code(Error::NonFinite {
                loss: f64::NAN,
                step: 3,
                t: 1,
                snr_db: 0.0
            }),
            EXIT_NUMERIC
        );
        assert_eq!(code(Error::Checkpoint("x".into())), EXIT_FAILURE);
        let wrapped = anyhow::Error::new(Error::Config("x".into())).context("while loading");
        assert_eq!(exit_code(&wrapped), EXIT_CONFIG);
    }

    #[test]
    fn config_and_preset_are_exclusive() {
        let err = resolve_config(Some(Path::new("a.toml")), Some("smoke"), &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn overrides_apply_to_presets() {
        let cfg = resolve_config(None, Some("smoke"), &["trainer.seed=7".into()]).unwrap();
        assert_eq!(cfg.trainer.seed, 7);
    }
}

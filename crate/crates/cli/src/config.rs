//! TOML configuration files. Every file mirrors one config type field for
//! field; missing fields take their defaults and unknown fields are errors.

use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{CliError, CliResult};

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    toml::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use detdisc_core::trainer::TrainConfig;
    use detdisc_core::SynthConfig;

    #[test]
    fn missing_path_gives_defaults() {
        assert_eq!(load::<TrainConfig>(None).unwrap(), TrainConfig::default());
    }

    #[test]
    fn nested_tables_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.toml");
        std::fs::write(
            &p,
            "seed = 4\nouter_rounds = 1\n[epochs]\ninit = 2\n[mining]\ntop_k = 3\n",
        )
        .unwrap();
        let c: TrainConfig = load(Some(&p)).unwrap();
        assert_eq!(
            (c.seed, c.outer_rounds, c.epochs.init, c.epochs.strong, c.mining.top_k),
            (4, 1, 2, 20, 3)
        );
        std::fs::write(&p, "sed = 4\n").unwrap();
        let err = load::<TrainConfig>(Some(&p)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("sed"));
    }

    #[test]
    fn transform_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.toml");
        std::fs::write(
            &p,
            "noise_sigma = 0.1\n[transform]\nkind = \"random\"\nstrength = 1.5\n",
        )
        .unwrap();
        let c: SynthConfig = load(Some(&p)).unwrap();
        assert_eq!(c.noise_sigma, 0.1);
        assert!(c.transform.is_some());
    }
}

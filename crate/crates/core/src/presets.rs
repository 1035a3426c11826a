//! Bundled scenario files.

use crate::config::{parse_config, ConfigError, ScenarioConfig};

pub const PRESETS: &[(&str, &str)] = &[
    ("paper_fig5a", include_str!("../presets/paper_fig5a.toml")),
    ("paper_fig5b", include_str!("../presets/paper_fig5b.toml")),
    ("async_linkage", include_str!("../presets/async_linkage.toml")),
    ("mixed_groups", include_str!("../presets/mixed_groups.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn preset(name: &str) -> Result<ScenarioConfig, ConfigError> {
    let text = preset_text(name).ok_or_else(|| ConfigError::Validation {
        path: "preset".into(),
        message: format!(
            "unknown preset `{name}` (known: {})",
            names().collect::<Vec<_>>().join(", ")
        ),
    })?;
    parse_config(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_parse() {
        for name in names() {
            preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn fig5a_preset_values() {
        let c = preset("paper_fig5a").unwrap();
        assert_eq!(c.vmus.len(), 6);
        assert_eq!((c.theta(), c.period()), (10.0, 60.0));
        assert_eq!((c.h_store, c.r_penalty), (0.1, 0.3));
        let e = &c.entropy;
        assert_eq!((e.h_max, e.h_0, e.h_min, e.alpha), (1.5, 1.0, 0.25, 1.0));
        let f: Vec<f64> = c.vmus.iter().map(|v| v.frequency).collect();
        assert_eq!(f, vec![1.0, 1.2, 1.4, 1.6, 1.8, 2.0]);
    }
}

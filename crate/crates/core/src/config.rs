//! TOML scenario files.
//!
//! Every value is read with its source span so validation errors can point
//! at the offending line.

use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;

use crate::controllers::Gains;
use crate::dynamics::{ManipulatorParams, TwoLinkPlanar};
use crate::exosystem::{DisturbanceKind, ExosystemSpec, SinusoidSpec};
use crate::internal_model::{build_internal_model, InternalModelPair};
use crate::simulation::{ControllerKind, Scenario, DEFAULT_SETTLE_TOL};

/// The bundled reference scenario.
pub const REFERENCE_SCENARIO: &str = include_str!("../../../scenarios/reference.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: `{key}` {message}")]
    Invalid { line: usize, key: String, message: String },
}

impl ConfigError {
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::Io { .. } => None,
            Self::Syntax { line, .. } | Self::Invalid { line, .. } => Some(*line),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub l1: Spanned<f64>,
    pub l2: Spanned<f64>,
    pub m1: Spanned<f64>,
    pub m2: Spanned<f64>,
    pub g0: Spanned<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceEntry {
    pub freq: Spanned<f64>,
    pub amp: Spanned<f64>,
    #[serde(default)]
    pub phase: Option<Spanned<f64>>,
    /// 1-based channel.
    pub channel: Spanned<i64>,
    pub kind: Spanned<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub kind: Spanned<String>,
    pub kp: Spanned<f64>,
    pub kd: Spanned<f64>,
    pub h: Spanned<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InternalModelSection {
    pub torque: Spanned<Vec<Vec<f64>>>,
    pub force: Spanned<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub q0: Spanned<Vec<f64>>,
    pub xi0: Spanned<Vec<f64>>,
    /// Packed controller state; zeros when absent.
    #[serde(default)]
    pub controller_state: Option<Spanned<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    pub xd: Spanned<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub dt: Spanned<f64>,
    pub t_end: Spanned<f64>,
    #[serde(default)]
    pub settle_tol: Option<Spanned<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub model: ModelSection,
    pub disturbances: Spanned<Vec<DisturbanceEntry>>,
    pub controller: ControllerSection,
    pub internal_model: InternalModelSection,
    pub initial: InitialSection,
    pub target: TargetSection,
    pub sim: SimSection,
}

fn line_of(src: &str, offset: usize) -> usize {
    src.as_bytes()[..offset.min(src.len())]
        .iter()
        .filter(|&&b| b == b'\n')
        .count()
        + 1
}

struct Checker<'a> {
    src: &'a str,
}

impl Checker<'_> {
    fn err(&self, span: Range<usize>, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            line: line_of(self.src, span.start),
            key: key.to_string(),
            message: message.into(),
        }
    }

    fn positive(&self, v: &Spanned<f64>, key: &str) -> Result<f64, ConfigError> {
        let x = *v.get_ref();
        if x.is_finite() && x > 0.0 {
            Ok(x)
        } else {
            Err(self.err(v.span(), key, format!("must be finite and positive (got {x})")))
        }
    }

    fn finite(&self, v: &Spanned<f64>, key: &str) -> Result<f64, ConfigError> {
        let x = *v.get_ref();
        if x.is_finite() {
            Ok(x)
        } else {
            Err(self.err(v.span(), key, format!("must be finite (got {x})")))
        }
    }

    fn vector(&self, v: &Spanned<Vec<f64>>, key: &str, len: usize) -> Result<DVector<f64>, ConfigError> {
        let xs = v.get_ref();
        if xs.len() != len {
            return Err(self.err(v.span(), key, format!("must have {len} entries (got {})", xs.len())));
        }
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(self.err(v.span(), key, "entries must be finite"));
        }
        Ok(DVector::from_column_slice(xs))
    }

    fn frequencies(&self, v: &Spanned<Vec<Vec<f64>>>, key: &str, n: usize) -> Result<Vec<Vec<f64>>, ConfigError> {
        let lists = v.get_ref();
        if lists.len() != n {
            return Err(self.err(
                v.span(),
                key,
                format!("needs one frequency list per channel ({n}), got {}", lists.len()),
            ));
        }
        Ok(lists.clone())
    }
}

impl ScenarioFile {
    pub fn parse(src: &str) -> Result<Self, ConfigError> {
        toml::from_str(src).map_err(|e| ConfigError::Syntax {
            line: e.span().map_or(1, |s| line_of(src, s.start)),
            message: e.message().trim().to_string(),
        })
    }

    /// Validate against `src` (the text this file was parsed from) and build
    /// the scenario.
    pub fn to_scenario(&self, src: &str) -> Result<Scenario, ConfigError> {
        let c = Checker { src };
        let m = &self.model;
        let params = ManipulatorParams {
            l1: c.positive(&m.l1, "model.l1")?,
            l2: c.positive(&m.l2, "model.l2")?,
            m1: c.positive(&m.m1, "model.m1")?,
            m2: c.positive(&m.m2, "model.m2")?,
            g0: {
                let g = c.finite(&m.g0, "model.g0")?;
                if g < 0.0 {
                    return Err(c.err(m.g0.span(), "model.g0", format!("must be non-negative (got {g})")));
                }
                g
            },
        };
        let model = TwoLinkPlanar::new(params).map_err(|e| c.err(m.l1.span(), "model", e.to_string()))?;
        let n = params.n_joints();

        let ctl = &self.controller;
        let controller: ControllerKind =
            ctl.kind
                .get_ref()
                .parse()
                .map_err(|e: crate::simulation::UnknownController| {
                    c.err(ctl.kind.span(), "controller.kind", e.to_string())
                })?;
        let gains = Gains {
            kp: c.positive(&ctl.kp, "controller.kp")?,
            kd: c.positive(&ctl.kd, "controller.kd")?,
            h: c.positive(&ctl.h, "controller.h")?,
        };

        let entries = self.disturbances.get_ref();
        if entries.is_empty() {
            return Err(c.err(self.disturbances.span(), "disturbances", "must list at least one term"));
        }
        let mut specs = Vec::with_capacity(entries.len());
        for (i, d) in entries.iter().enumerate() {
            let key = |f: &str| format!("disturbances[{i}].{f}");
            let frequency = c.finite(&d.freq, &key("freq"))?;
            if frequency < 0.0 {
                return Err(c.err(
                    d.freq.span(),
                    &key("freq"),
                    format!("must be non-negative (got {frequency})"),
                ));
            }
            let channel = *d.channel.get_ref();
            if channel < 1 || channel as usize > n {
                return Err(c.err(
                    d.channel.span(),
                    &key("channel"),
                    format!("must be in 1..={n} (got {channel})"),
                ));
            }
            let kind = match d.kind.get_ref().to_ascii_lowercase().as_str() {
                "torque" => DisturbanceKind::Torque,
                "force" => DisturbanceKind::Force,
                other => {
                    return Err(c.err(
                        d.kind.span(),
                        &key("kind"),
                        format!("must be \"torque\" or \"force\" (got \"{other}\")"),
                    ))
                }
            };
            specs.push(SinusoidSpec {
                frequency,
                amplitude: c.finite(&d.amp, &key("amp"))?,
                phase: match &d.phase {
                    Some(p) => c.finite(p, &key("phase"))?,
                    None => 0.0,
                },
                channel: channel as usize - 1,
                kind,
            });
        }
        let exo = ExosystemSpec::from_sinusoids(&specs, n)
            .map_err(|e| c.err(self.disturbances.span(), "disturbances", e.to_string()))?;
        for w in &exo.warnings {
            log::warn!("{w}");
        }

        let im = &self.internal_model;
        let torque = build_internal_model(
            &c.frequencies(&im.torque, "internal_model.torque", n)?,
            DisturbanceKind::Torque,
        )
        .map_err(|e| c.err(im.torque.span(), "internal_model.torque", e.to_string()))?;
        let force = build_internal_model(
            &c.frequencies(&im.force, "internal_model.force", n)?,
            DisturbanceKind::Force,
        )
        .map_err(|e| c.err(im.force.span(), "internal_model.force", e.to_string()))?;
        let ims = InternalModelPair::new(torque, force)
            .map_err(|e| c.err(im.torque.span(), "internal_model", e.to_string()))?;

        let x_d = c.vector(&self.target.xd, "target.xd", n)?;
        let (inner, outer) = params.reach();
        let r = x_d.norm();
        if r < inner || r > outer {
            return Err(c.err(
                self.target.xd.span(),
                "target.xd",
                format!("lies outside the reachable annulus [{inner}, {outer}] (radius {r:.4})"),
            ));
        }

        let s = &self.sim;
        let dt = c.positive(&s.dt, "sim.dt")?;
        let t_end = c.positive(&s.t_end, "sim.t_end")?;
        if t_end <= dt {
            return Err(c.err(
                s.t_end.span(),
                "sim.t_end",
                format!("must exceed sim.dt = {dt} (got {t_end})"),
            ));
        }
        let settle_tol = match &s.settle_tol {
            Some(v) => c.positive(v, "sim.settle_tol")?,
            None => DEFAULT_SETTLE_TOL,
        };

        let ctl0 = match &self.initial.controller_state {
            Some(v) => Some(c.vector(v, "initial.controller_state", v.get_ref().len())?),
            None => None,
        };
        let scn = Scenario {
            model,
            exo,
            ims,
            gains,
            controller,
            x_d,
            q0: c.vector(&self.initial.q0, "initial.q0", n)?,
            xi0: c.vector(&self.initial.xi0, "initial.xi0", n)?,
            ctl0,
            t_end,
            dt,
            settle_tol,
        };
        if let Err(e) = scn.validate() {
            let span = self
                .initial
                .controller_state
                .as_ref()
                .map_or(self.initial.q0.span(), |v| v.span());
            return Err(c.err(span, "initial", e.to_string()));
        }
        Ok(scn)
    }
}

pub fn load_scenario_str(src: &str) -> Result<Scenario, ConfigError> {
    ScenarioFile::parse(src)?.to_scenario(src)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ConfigError> {
    let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    load_scenario_str(&src)
}

pub fn reference_scenario() -> Scenario {
    load_scenario_str(REFERENCE_SCENARIO).expect("bundled scenario is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_file_matches_builtin_reference() {
        let from_file = reference_scenario();
        assert_eq!(from_file, Scenario::reference(ControllerKind::VelocityFree));
    }

    #[test]
    fn negative_gain_names_key_and_line() {
        let src = REFERENCE_SCENARIO.replace("kp = 50.0", "kp = -50.0");
        let err = load_scenario_str(&src).unwrap_err();
        let line = src.lines().position(|l| l.starts_with("kp =")).unwrap() + 1;
        match err {
            ConfigError::Invalid { line: l, key, .. } => {
                assert_eq!(key, "controller.kp");
                assert_eq!(l, line);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn missing_section_is_a_syntax_error() {
        let src = REFERENCE_SCENARIO.replace("[sim]", "[simulation]");
        let err = load_scenario_str(&src).unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { .. }), "{err}");
    }

    #[test]
    fn channel_is_one_based() {
        let src = REFERENCE_SCENARIO.replacen("channel = 1", "channel = 0", 1);
        let err = load_scenario_str(&src).unwrap_err();
        assert!(err.to_string().contains("disturbances[0].channel"), "{err}");
    }

    #[test]
    fn unreachable_target_rejected() {
        let src = REFERENCE_SCENARIO.replace("xd = [0.064, 0.290]", "xd = [0.5, 0.290]");
        let err = load_scenario_str(&src).unwrap_err();
        assert!(err.to_string().contains("target.xd"), "{err}");
    }

    #[test]
    fn unknown_controller_rejected() {
        let src = REFERENCE_SCENARIO.replace("kind = \"velocity-free\"", "kind = \"pid\"");
        assert!(load_scenario_str(&src)
            .unwrap_err()
            .to_string()
            .contains("controller.kind"));
    }
}

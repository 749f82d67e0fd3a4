//! Linear harmonic exosystem `ẇ = S w` with disturbance outputs
//! `d₁ = D₁ w` (joint torques) and `d₂ = D₂ w` (end-effector forces).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frequencies closer than this are treated as the same oscillator.
const FREQ_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExoError {
    #[error("no sinusoids given")]
    Empty,
    #[error("sinusoid {index}: frequency {frequency} must be finite and non-negative")]
    BadFrequency { index: usize, frequency: f64 },
    #[error("sinusoid {index}: amplitude and phase must be finite")]
    BadAmplitude { index: usize },
    #[error("sinusoid {index}: channel {channel} out of range for {n_joints} joints")]
    BadChannel {
        index: usize,
        channel: usize,
        n_joints: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {got} for {what}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("S is not block-diagonal with 2x2 rotation generators and 1x1 zero blocks")]
    NotHarmonic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisturbanceKind {
    /// Input torque disturbance `d₁`.
    Torque,
    /// End-effector force disturbance `d₂`, mapped through `Jᵀ(q)`.
    Force,
}

/// One term `F sin(ω t + Υ)` on a single channel.
///
/// A zero frequency denotes a constant bias of value `amplitude`; the phase
/// is then ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinusoidSpec {
    pub frequency: f64,
    pub amplitude: f64,
    pub phase: f64,
    /// Zero-based joint (torque) or task-axis (force) index.
    pub channel: usize,
    pub kind: DisturbanceKind,
}

/// A diagonal block of `S`: a rotation generator, or a 1x1 zero for a bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscillatorBlock {
    pub frequency: f64,
    pub offset: usize,
}

impl OscillatorBlock {
    pub fn size(&self) -> usize {
        if self.frequency == 0.0 {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExosystemSpec {
    pub s: DMatrix<f64>,
    pub d1: DMatrix<f64>,
    pub d2: DMatrix<f64>,
    pub w0: DVector<f64>,
    pub blocks: Vec<OscillatorBlock>,
    /// Non-fatal construction notices (bias blocks make `S` singular).
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSample {
    pub d1: DVector<f64>,
    pub d2: DVector<f64>,
    pub d: DVector<f64>,
}

fn rotation_generator(w: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, w, -w, 0.0])
}

const BIAS_WARNING: &str =
    "constant bias terms add zero eigenvalues: S is singular and the exosystem nonsingularity assumption is relaxed";

impl ExosystemSpec {
    /// Build an exosystem reproducing the given sinusoids exactly.
    ///
    /// Distinct frequencies get one oscillator block each (ascending order).
    /// The first non-zero-amplitude term at a frequency sets the block's
    /// initial state `[F sin Υ, F cos Υ]` and reads it through a 0/1 selector;
    /// further terms at the same frequency reuse the block with a
    /// phase-shifted row `(F'/F)[cos Δ, sin Δ]`.
    pub fn from_sinusoids(specs: &[SinusoidSpec], n_joints: usize) -> Result<Self, ExoError> {
        if specs.is_empty() {
            return Err(ExoError::Empty);
        }
        for (index, sp) in specs.iter().enumerate() {
            if !(sp.frequency.is_finite() && sp.frequency >= 0.0) {
                return Err(ExoError::BadFrequency {
                    index,
                    frequency: sp.frequency,
                });
            }
            if !(sp.amplitude.is_finite() && sp.phase.is_finite()) {
                return Err(ExoError::BadAmplitude { index });
            }
            if sp.channel >= n_joints {
                return Err(ExoError::BadChannel {
                    index,
                    channel: sp.channel,
                    n_joints,
                });
            }
        }

        let mut freqs: Vec<f64> = Vec::new();
        for sp in specs {
            if !freqs.iter().any(|f| (f - sp.frequency).abs() <= FREQ_TOL) {
                freqs.push(sp.frequency);
            }
        }
        freqs.sort_by(f64::total_cmp);

        let mut blocks = Vec::with_capacity(freqs.len());
        let mut offset = 0;
        for &frequency in &freqs {
            let b = OscillatorBlock { frequency, offset };
            offset += b.size();
            blocks.push(b);
        }
        let p = offset;

        let mut s = DMatrix::zeros(p, p);
        let mut w0 = DVector::zeros(p);
        let mut d1 = DMatrix::zeros(n_joints, p);
        let mut d2 = DMatrix::zeros(n_joints, p);
        let mut warnings = Vec::new();

        for b in &blocks {
            let members: Vec<&SinusoidSpec> = specs
                .iter()
                .filter(|sp| (sp.frequency - b.frequency).abs() <= FREQ_TOL)
                .collect();
            let target = |kind: DisturbanceKind,
                          d1: &mut DMatrix<f64>,
                          d2: &mut DMatrix<f64>,
                          ch: usize,
                          col: usize,
                          val: f64| match kind {
                DisturbanceKind::Torque => d1[(ch, col)] += val,
                DisturbanceKind::Force => d2[(ch, col)] += val,
            };

            if b.frequency == 0.0 {
                if warnings.is_empty() {
                    log::warn!("{BIAS_WARNING}");
                    warnings.push(BIAS_WARNING.to_string());
                }
                // Bias: w holds the first non-zero value; others scale it.
                let reference = members.iter().map(|sp| sp.amplitude).find(|a| *a != 0.0).unwrap_or(0.0);
                w0[b.offset] = reference;
                for sp in &members {
                    let coef = if reference == 0.0 {
                        1.0
                    } else {
                        sp.amplitude / reference
                    };
                    target(sp.kind, &mut d1, &mut d2, sp.channel, b.offset, coef);
                }
                continue;
            }

            s.view_mut((b.offset, b.offset), (2, 2))
                .copy_from(&rotation_generator(b.frequency));
            let Some(ref_idx) = members.iter().position(|sp| sp.amplitude != 0.0) else {
                for sp in &members {
                    target(sp.kind, &mut d1, &mut d2, sp.channel, b.offset, 1.0);
                }
                continue;
            };
            let r = members[ref_idx];
            w0[b.offset] = r.amplitude * r.phase.sin();
            w0[b.offset + 1] = r.amplitude * r.phase.cos();
            for (k, sp) in members.iter().enumerate() {
                if k == ref_idx {
                    target(sp.kind, &mut d1, &mut d2, sp.channel, b.offset, 1.0);
                    continue;
                }
                let ratio = sp.amplitude / r.amplitude;
                let delta = sp.phase - r.phase;
                target(sp.kind, &mut d1, &mut d2, sp.channel, b.offset, ratio * delta.cos());
                target(sp.kind, &mut d1, &mut d2, sp.channel, b.offset + 1, ratio * delta.sin());
            }
        }

        Ok(Self {
            s,
            d1,
            d2,
            w0,
            blocks,
            warnings,
        })
    }

    /// Wrap explicit matrices, recovering the block structure of `S`.
    pub fn from_matrices(
        s: DMatrix<f64>,
        d1: DMatrix<f64>,
        d2: DMatrix<f64>,
        w0: DVector<f64>,
    ) -> Result<Self, ExoError> {
        let p = s.nrows();
        if !s.is_square() {
            return Err(ExoError::Dimension {
                what: "S columns",
                expected: p,
                got: s.ncols(),
            });
        }
        for (what, got) in [("D1 columns", d1.ncols()), ("D2 columns", d2.ncols()), ("w0", w0.len())] {
            if got != p {
                return Err(ExoError::Dimension { what, expected: p, got });
            }
        }
        if d1.nrows() != d2.nrows() {
            return Err(ExoError::Dimension {
                what: "D2 rows",
                expected: d1.nrows(),
                got: d2.nrows(),
            });
        }

        let mut blocks = Vec::new();
        let mut i = 0;
        while i < p {
            let is_rotation = i + 1 < p && s[(i, i + 1)] != 0.0;
            let size = if is_rotation { 2 } else { 1 };
            let frequency = if is_rotation { s[(i, i + 1)] } else { 0.0 };
            let expected = if is_rotation {
                rotation_generator(frequency)
            } else {
                DMatrix::zeros(1, 1)
            };
            if is_rotation && frequency <= 0.0 {
                return Err(ExoError::NotHarmonic);
            }
            if s.view((i, i), (size, size)) != expected {
                return Err(ExoError::NotHarmonic);
            }
            blocks.push(OscillatorBlock { frequency, offset: i });
            i += size;
        }
        let mut structured = DMatrix::zeros(p, p);
        for b in &blocks {
            if b.size() == 2 {
                structured
                    .view_mut((b.offset, b.offset), (2, 2))
                    .copy_from(&rotation_generator(b.frequency));
            }
        }
        if structured != s {
            return Err(ExoError::NotHarmonic);
        }
        let mut warnings = Vec::new();
        if blocks.iter().any(|b| b.frequency == 0.0) {
            log::warn!("{BIAS_WARNING}");
            warnings.push(BIAS_WARNING.to_string());
        }
        Ok(Self {
            s,
            d1,
            d2,
            w0,
            blocks,
            warnings,
        })
    }

    pub fn dim(&self) -> usize {
        self.s.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.d1.nrows()
    }

    pub fn has_bias(&self) -> bool {
        self.blocks.iter().any(|b| b.frequency == 0.0)
    }

    /// `D = [D₁; D₂]`.
    pub fn stacked_output(&self) -> DMatrix<f64> {
        let n = self.n_channels();
        let mut d = DMatrix::zeros(2 * n, self.dim());
        d.view_mut((0, 0), (n, self.dim())).copy_from(&self.d1);
        d.view_mut((n, 0), (n, self.dim())).copy_from(&self.d2);
        d
    }

    pub fn derivative(&self, w: &DVector<f64>) -> Result<DVector<f64>, ExoError> {
        self.check_state(w)?;
        Ok(&self.s * w)
    }

    /// Closed-form `w(t) = exp(S t) w₀`, rotating each block by `ω t`.
    pub fn solution(&self, t: f64) -> DVector<f64> {
        let mut w = self.w0.clone();
        for b in &self.blocks {
            if b.size() == 2 {
                let (sn, cs) = (b.frequency * t).sin_cos();
                let (a, c) = (self.w0[b.offset], self.w0[b.offset + 1]);
                w[b.offset] = cs * a + sn * c;
                w[b.offset + 1] = -sn * a + cs * c;
            }
        }
        w
    }

    pub fn disturbance(&self, w: &DVector<f64>, jacobian: &DMatrix<f64>) -> Result<DisturbanceSample, ExoError> {
        self.check_state(w)?;
        let n = self.n_channels();
        if jacobian.shape() != (n, n) {
            return Err(ExoError::Dimension {
                what: "Jacobian rows",
                expected: n,
                got: jacobian.nrows(),
            });
        }
        let d1 = &self.d1 * w;
        let d2 = &self.d2 * w;
        let d = &d1 + jacobian.transpose() * &d2;
        Ok(DisturbanceSample { d1, d2, d })
    }

    fn check_state(&self, w: &DVector<f64>) -> Result<(), ExoError> {
        if w.len() != self.dim() {
            return Err(ExoError::Dimension {
                what: "w",
                expected: self.dim(),
                got: w.len(),
            });
        }
        Ok(())
    }
}

/// The four-tone disturbance set of the bundled scenario: torques at
/// ω = 1, 3 and end-effector forces at ω = 2, 4, all with amplitude 0.1.
pub fn reference_sinusoids() -> Vec<SinusoidSpec> {
    let tone = |frequency: f64, channel: usize, kind: DisturbanceKind| SinusoidSpec {
        frequency,
        amplitude: 0.1,
        phase: 0.0,
        channel,
        kind,
    };
    vec![
        tone(1.0, 0, DisturbanceKind::Torque),
        tone(3.0, 1, DisturbanceKind::Torque),
        tone(2.0, 0, DisturbanceKind::Force),
        tone(4.0, 1, DisturbanceKind::Force),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn single(freq: f64, amp: f64, phase: f64) -> SinusoidSpec {
        SinusoidSpec {
            frequency: freq,
            amplitude: amp,
            phase,
            channel: 0,
            kind: DisturbanceKind::Torque,
        }
    }

    #[test]
    fn single_tone_layout() {
        let exo = ExosystemSpec::from_sinusoids(&[single(1.0, 0.1, 0.0)], 2).unwrap();
        assert_eq!(exo.s, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]));
        assert_eq!(exo.d1.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert_eq!(exo.d1.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        assert_eq!(exo.w0.as_slice(), &[0.0, 0.1]);
        assert!(exo.warnings.is_empty());
    }

    #[test]
    fn reference_set_has_four_blocks() {
        let exo = ExosystemSpec::from_sinusoids(&reference_sinusoids(), 2).unwrap();
        assert_eq!(exo.dim(), 8);
        let freqs: Vec<f64> = exo.blocks.iter().map(|b| b.frequency).collect();
        assert_eq!(freqs, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&exo.s + exo.s.transpose(), DMatrix::zeros(8, 8));
        assert!(exo.s.determinant().abs() > 1.0);
        // All tones start at zero phase.
        let dist = exo.disturbance(&exo.w0, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(dist.d1, DVector::zeros(2));
        assert_eq!(dist.d2, DVector::zeros(2));
        // Every D entry is a 0/1 selector.
        assert!(exo.d1.iter().chain(exo.d2.iter()).all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn reproduces_requested_signals() {
        let specs = vec![
            single(1.5, 0.3, 0.4),
            SinusoidSpec {
                channel: 1,
                amplitude: 0.2,
                phase: -1.1,
                ..single(1.5, 0.0, 0.0)
            },
            SinusoidSpec {
                kind: DisturbanceKind::Force,
                ..single(0.7, 0.05, 2.0)
            },
        ];
        let exo = ExosystemSpec::from_sinusoids(&specs, 2).unwrap();
        assert_eq!(exo.dim(), 4, "shared 1.5 rad/s block");
        for t in [0.0, 0.37, 2.0, 11.3] {
            let w = exo.solution(t);
            let d1 = &exo.d1 * &w;
            let d2 = &exo.d2 * &w;
            assert_abs_diff_eq!(d1[0], 0.3 * (1.5 * t + 0.4).sin(), epsilon = 1e-14);
            assert_abs_diff_eq!(d1[1], 0.2 * (1.5 * t - 1.1).sin(), epsilon = 1e-14);
            assert_abs_diff_eq!(d2[0], 0.05 * (0.7 * t + 2.0).sin(), epsilon = 1e-14);
            assert_abs_diff_eq!(d2[1], 0.0);
        }
    }

    #[test]
    fn zero_amplitude_is_silent() {
        let exo = ExosystemSpec::from_sinusoids(&[single(1.0, 0.0, 0.8)], 1).unwrap();
        for t in [0.0, 1.0, 5.0] {
            assert_eq!((&exo.d1 * exo.solution(t))[0], 0.0);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert_eq!(ExosystemSpec::from_sinusoids(&[], 2), Err(ExoError::Empty));
        assert!(matches!(
            ExosystemSpec::from_sinusoids(&[single(-1.0, 0.1, 0.0)], 2),
            Err(ExoError::BadFrequency { .. })
        ));
        let bad_channel = SinusoidSpec {
            channel: 2,
            ..single(1.0, 0.1, 0.0)
        };
        assert!(matches!(
            ExosystemSpec::from_sinusoids(&[bad_channel], 2),
            Err(ExoError::BadChannel { .. })
        ));
    }

    #[test]
    fn bias_block_warns() {
        let exo = ExosystemSpec::from_sinusoids(&[single(0.0, 0.25, 0.0), single(2.0, 0.1, 0.0)], 1).unwrap();
        assert_eq!(exo.dim(), 3);
        assert_eq!(exo.warnings.len(), 1);
        assert!(exo.has_bias());
        for t in [0.0, 3.0] {
            let d = (&exo.d1 * exo.solution(t))[0];
            assert_abs_diff_eq!(d, 0.25 + 0.1 * (2.0 * t).sin(), epsilon = 1e-14);
        }
    }

    #[test]
    fn derivative_and_solution_examples() {
        let exo = ExosystemSpec::from_sinusoids(&[single(1.0, 0.1, 0.0)], 1).unwrap();
        let w = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(exo.derivative(&w).unwrap().as_slice(), &[1.0, 0.0]);
        assert_eq!(exo.derivative(&DVector::zeros(2)).unwrap(), DVector::zeros(2));
        assert!(exo.derivative(&DVector::zeros(3)).is_err());

        let quarter = exo.solution(FRAC_PI_2);
        assert_abs_diff_eq!(quarter[0], 0.1, epsilon = 1e-16);
        assert_abs_diff_eq!(quarter[1], 0.0, epsilon = 1e-16);
        assert_eq!(exo.solution(0.0), exo.w0);
        let full = exo.solution(2.0 * PI);
        assert_abs_diff_eq!(full, exo.w0, epsilon = 1e-15);
    }

    #[test]
    fn disturbance_maps() {
        let exo = ExosystemSpec::from_sinusoids(&reference_sinusoids(), 2).unwrap();
        let w = DVector::from_fn(8, |i, _| 0.1 * (i as f64 + 1.0));
        let j = DMatrix::from_row_slice(2, 2, &[0.3, -0.1, 0.2, 0.5]);
        let sample = exo.disturbance(&w, &j).unwrap();
        assert_abs_diff_eq!(sample.d, &sample.d1 + j.transpose() * &sample.d2, epsilon = 1e-15);
        assert!(exo.disturbance(&w, &DMatrix::identity(3, 3)).is_err());

        let pure_force = ExosystemSpec::from_sinusoids(
            &[SinusoidSpec {
                kind: DisturbanceKind::Force,
                ..single(1.0, 0.1, 0.3)
            }],
            2,
        )
        .unwrap();
        let s = pure_force
            .disturbance(&pure_force.w0, &DMatrix::identity(2, 2))
            .unwrap();
        assert_eq!(s.d, s.d2);
    }

    #[test]
    fn from_matrices_recovers_blocks() {
        let exo = ExosystemSpec::from_sinusoids(&reference_sinusoids(), 2).unwrap();
        let again =
            ExosystemSpec::from_matrices(exo.s.clone(), exo.d1.clone(), exo.d2.clone(), exo.w0.clone()).unwrap();
        assert_eq!(again.blocks, exo.blocks);

        let mut bad = exo.s.clone();
        bad[(0, 3)] = 1.0;
        assert_eq!(
            ExosystemSpec::from_matrices(bad, exo.d1.clone(), exo.d2.clone(), exo.w0.clone()),
            Err(ExoError::NotHarmonic)
        );
    }
}

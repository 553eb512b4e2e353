use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One point in parameter space, on the constrained scale.
///
/// `phi` is the free random-effect block: areal effects under the post
/// parameterisation, membership effects under the inverse one, empty when
/// the model has no spatial term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub gamma: f64,
    pub beta: Vec<f64>,
    pub phi: Vec<f64>,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub psi: Option<f64>,
}

/// Positions of each block inside the flat (unconstrained or constrained)
/// vector: `[gamma, beta.., phi.., alpha?, tau?, psi?]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub p: usize,
    pub phi_len: usize,
    pub has_alpha: bool,
    pub has_tau: bool,
    pub has_psi: bool,
}

impl Layout {
    pub const GAMMA: usize = 0;

    pub fn beta(&self) -> std::ops::Range<usize> {
        1..1 + self.p
    }

    pub fn phi(&self) -> std::ops::Range<usize> {
        1 + self.p..1 + self.p + self.phi_len
    }

    pub fn alpha(&self) -> Option<usize> {
        self.has_alpha.then_some(self.phi().end)
    }

    pub fn tau(&self) -> Option<usize> {
        self.has_tau.then_some(self.phi().end + self.has_alpha as usize)
    }

    pub fn psi(&self) -> Option<usize> {
        self.has_psi
            .then_some(self.phi().end + self.has_alpha as usize + self.has_tau as usize)
    }

    pub fn dim(&self) -> usize {
        self.phi().end + self.has_alpha as usize + self.has_tau as usize + self.has_psi as usize
    }

    /// Column names of the flattened vector; `phi_name` is `phi` or
    /// `phi_tilde`.
    pub fn names(&self, phi_name: &str) -> Vec<String> {
        let mut out = vec!["gamma".to_string()];
        out.extend((1..=self.p).map(|k| format!("beta[{k}]")));
        out.extend((1..=self.phi_len).map(|k| format!("{phi_name}[{k}]")));
        if self.has_alpha {
            out.push("alpha".into());
        }
        if self.has_tau {
            out.push("tau".into());
        }
        if self.has_psi {
            out.push("psi".into());
        }
        out
    }

    /// Checks a constrained vector has the right shape and finite entries.
    pub fn check(&self, theta: &ParamVector) -> Result<()> {
        if theta.beta.len() != self.p || theta.phi.len() != self.phi_len {
            return Err(Error::DimensionMismatch(format!(
                "expected {} beta and {} phi entries, got {} and {}",
                self.p,
                self.phi_len,
                theta.beta.len(),
                theta.phi.len()
            )));
        }
        if theta.alpha.is_some() != self.has_alpha || theta.tau.is_some() != self.has_tau || theta.psi.is_some() != self.has_psi {
            return Err(Error::DimensionMismatch("hyperparameter presence does not match the model".into()));
        }
        let finite = theta.gamma.is_finite()
            && theta.beta.iter().chain(&theta.phi).all(|v| v.is_finite())
            && [theta.alpha, theta.tau, theta.psi].iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NumericDomain("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn flatten(&self, theta: &ParamVector) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.push(theta.gamma);
        out.extend_from_slice(&theta.beta);
        out.extend_from_slice(&theta.phi);
        out.extend(theta.alpha);
        out.extend(theta.tau);
        out.extend(theta.psi);
        out
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamVector> {
        if flat.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!("expected {} values, got {}", self.dim(), flat.len())));
        }
        Ok(ParamVector {
            gamma: flat[Self::GAMMA],
            beta: flat[self.beta()].to_vec(),
            phi: flat[self.phi()].to_vec(),
            alpha: self.alpha().map(|i| flat[i]),
            tau: self.tau().map(|i| flat[i]),
            psi: self.psi().map(|i| flat[i]),
        })
    }

    /// Unconstrained -> constrained: logistic for alpha, exp for tau and psi.
    pub fn constrain(&self, x: &[f64]) -> ParamVector {
        ParamVector {
            gamma: x[Self::GAMMA],
            beta: x[self.beta()].to_vec(),
            phi: x[self.phi()].to_vec(),
            alpha: self.alpha().map(|i| logistic(x[i])),
            tau: self.tau().map(|i| x[i].exp()),
            psi: self.psi().map(|i| x[i].exp()),
        }
    }

    pub fn unconstrain(&self, theta: &ParamVector) -> Result<Vec<f64>> {
        self.check(theta)?;
        let mut out = self.flatten(theta);
        if let (Some(i), Some(a)) = (self.alpha(), theta.alpha) {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::NumericDomain(format!("alpha {a} outside (0, 1)")));
            }
            out[i] = (a / (1.0 - a)).ln();
        }
        for (idx, v) in [(self.tau(), theta.tau), (self.psi(), theta.psi)] {
            if let (Some(i), Some(v)) = (idx, v) {
                if !(v > 0.0) {
                    return Err(Error::NumericDomain(format!("scale parameter {v} must be positive")));
                }
                out[i] = v.ln();
            }
        }
        Ok(out)
    }
}

pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Layout {
        Layout { p: 2, phi_len: 3, has_alpha: true, has_tau: true, has_psi: true }
    }

    #[test]
    fn names_and_positions() {
        let l = layout();
        assert_eq!(l.dim(), 9);
        assert_eq!(l.alpha(), Some(6));
        assert_eq!(l.tau(), Some(7));
        assert_eq!(l.psi(), Some(8));
        assert_eq!(
            l.names("phi"),
            ["gamma", "beta[1]", "beta[2]", "phi[1]", "phi[2]", "phi[3]", "alpha", "tau", "psi"]
        );
        let glm = Layout { p: 2, phi_len: 0, has_alpha: false, has_tau: false, has_psi: false };
        assert_eq!(glm.names("phi"), ["gamma", "beta[1]", "beta[2]"]);
    }

    #[test]
    fn transforms_invert() {
        let l = layout();
        let theta = ParamVector {
            gamma: 0.2,
            beta: vec![-0.3, 0.1],
            phi: vec![0.5, -0.4, 0.0],
            alpha: Some(0.7),
            tau: Some(4.0),
            psi: Some(12.0),
        };
        let x = l.unconstrain(&theta).unwrap();
        let back = l.constrain(&x);
        assert!((back.alpha.unwrap() - 0.7).abs() < 1e-14);
        assert!((back.tau.unwrap() - 4.0).abs() < 1e-13);
        assert!((back.psi.unwrap() - 12.0).abs() < 1e-12);
        assert_eq!(l.unflatten(&l.flatten(&theta)).unwrap(), theta);
        let mut bad = theta.clone();
        bad.alpha = Some(1.2);
        assert!(l.unconstrain(&bad).is_err());
    }
}

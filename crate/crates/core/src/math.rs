//! Scalar helpers shared by the estimators.

/// Largest exponent passed to `exp` before saturating.
pub const EXP_CAP: f64 = 700.0;

/// Bound applied to log-odds offsets `r` before exponentiation.
pub const R_CLIP: f64 = 30.0;

/// Bound applied to probabilities before taking a logit.
pub const PROB_CLIP: f64 = 1e-6;

pub fn expit(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + e^u)` without overflow.
pub fn softplus(u: f64) -> f64 {
    if u > 35.0 {
        u
    } else if u < -35.0 {
        u.exp()
    } else {
        u.exp().ln_1p()
    }
}

/// `e^u` with the exponent capped at [`EXP_CAP`]; the flag reports saturation.
#[inline]
pub fn exp_saturating(u: f64) -> (f64, bool) {
    if u > EXP_CAP {
        (EXP_CAP.exp(), true)
    } else {
        (u.exp(), false)
    }
}

/// Clamps a probability into `[clip, 1 - clip]`, reporting whether it moved.
#[inline]
pub fn clamp_prob(p: f64, clip: f64) -> (f64, bool) {
    if p < clip {
        (clip, true)
    } else if p > 1.0 - clip {
        (1.0 - clip, true)
    } else {
        (p, false)
    }
}

#[inline]
pub fn clamp_r(r: f64) -> (f64, bool) {
    if r > R_CLIP {
        (R_CLIP, true)
    } else if r < -R_CLIP {
        (-R_CLIP, true)
    } else {
        (r, false)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with `n - 1` denominator.
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

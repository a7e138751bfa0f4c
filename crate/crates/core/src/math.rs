//! Float helpers backed by `libm` so results do not depend on the host libm.

pub use core::f64::consts::{LN_2, PI};

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn log2(x: f64) -> f64 {
    libm::log2(x)
}

#[inline]
pub fn log10(x: f64) -> f64 {
    libm::log10(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn atan2(y: f64, x: f64) -> f64 {
    libm::atan2(y, x)
}

#[inline]
pub fn powf(x: f64, p: f64) -> f64 {
    libm::pow(x, p)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(exp(-x))
    } else {
        libm::log1p(exp(x))
    }
}

/// Numerically stable `ln(sum(exp(v)))`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = v.map(|x| exp(x - max)).sum();
    max + ln(s)
}

pub fn db_to_lin(db: f64) -> f64 {
    powf(10.0, db / 10.0)
}

pub fn lin_to_db(x: f64) -> f64 {
    10.0 * log10(x)
}

/// Launch power in dBm to watts.
pub fn dbm_to_watt(dbm: f64) -> f64 {
    1e-3 * db_to_lin(dbm)
}

const GK15_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK15_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const G7_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Kronrod estimate and Gauss-Kronrod error estimate over `[a, b]`.
fn gk15<F: Fn(f64) -> (f64, f64)>(f: &F, a: f64, b: f64) -> ((f64, f64), f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let (mut kr, mut ki, mut gr, mut gi) = (0.0, 0.0, 0.0, 0.0);
    for (j, (&x, &w)) in GK15_NODES.iter().zip(&GK15_WEIGHTS).enumerate() {
        let pts: &[f64] = if x == 0.0 { &[0.0] } else { &[x, -x] };
        for &s in pts {
            let (re, im) = f(c + h * s);
            kr += w * re;
            ki += w * im;
            if j % 2 == 1 {
                let gw = G7_WEIGHTS[j / 2];
                gr += gw * re;
                gi += gw * im;
            }
        }
    }
    let (kr, ki, gr, gi) = (kr * h, ki * h, gr * h, gi * h);
    let err = libm::hypot(kr - gr, ki - gi);
    ((kr, ki), err)
}

/// Adaptive Gauss-Kronrod (7/15) integral of a complex-valued function.
///
/// Bisects until each panel's error estimate is below its share of
/// `abs_tol`, or `max_panels` panels have been evaluated.
pub fn integrate_complex<F: Fn(f64) -> (f64, f64)>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    max_panels: usize,
) -> (f64, f64) {
    let mut stack = alloc::vec![(a, b)];
    let (mut sr, mut si) = (0.0, 0.0);
    let mut panels = 0;
    let width = b - a;
    while let Some((lo, hi)) = stack.pop() {
        let ((re, im), err) = gk15(&f, lo, hi);
        panels += 1;
        let share = abs_tol * (hi - lo) / width;
        if err <= share || panels + stack.len() >= max_panels || hi - lo < 1e-12 * width {
            sr += re;
            si += im;
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((mid, hi));
            stack.push((lo, mid));
        }
    }
    (sr, si)
}

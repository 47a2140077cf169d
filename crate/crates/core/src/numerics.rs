//! Small numerical helpers shared across modules.

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl Extend<f64> for CompensatedSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.add(x);
        }
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::new();
        s.extend(iter);
        s
    }
}

/// Relative distance below which a real is treated as the nearest integer
/// before taking floors and ceilings. Values like `log_2 8 = 3` otherwise land
/// on either side of the integer depending on rounding in `ln`.
pub const INTEGER_SNAP: f64 = 1e-12;

fn snapped(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= INTEGER_SNAP * r.abs().max(1.0) {
        r
    } else {
        x
    }
}

pub fn snap_floor(x: f64) -> f64 {
    snapped(x).floor()
}

pub fn snap_ceil(x: f64) -> f64 {
    snapped(x).ceil()
}

/// `log_base(x)`.
pub fn log_base(x: f64, base: f64) -> f64 {
    x.ln() / base.ln()
}

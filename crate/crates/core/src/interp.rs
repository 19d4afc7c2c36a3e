//! Monotone piecewise-cubic interpolation (Fritsch-Carlson slope limiting).
//!
//! Used for the radial psi cache of the relativistic kernel, the tail
//! inverse-CDF table of the jump sampler, and the channel-density tables the
//! simulator consumes per step. Monotone data stays monotone after
//! interpolation, which the samplers rely on.

/// Monotone cubic interpolant over a strictly increasing abscissa grid.
#[derive(Debug, Clone)]
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        assert!(xs.len() == ys.len() && xs.len() >= 2);
        assert!(xs.windows(2).all(|w| w[1] > w[0]), "abscissae must increase");
        let n = xs.len();
        let mut d = vec![0.0; n - 1]; // secant slopes
        for i in 0..n - 1 {
            d[i] = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
        }
        let mut m = vec![0.0; n];
        m[0] = d[0];
        m[n - 1] = d[n - 2];
        for i in 1..n - 1 {
            m[i] = if d[i - 1] * d[i] <= 0.0 {
                0.0
            } else {
                0.5 * (d[i - 1] + d[i])
            };
        }
        // Fritsch-Carlson limiter
        for i in 0..n - 1 {
            if d[i] == 0.0 {
                m[i] = 0.0;
                m[i + 1] = 0.0;
            } else {
                let a = m[i] / d[i];
                let b = m[i + 1] / d[i];
                let s = a * a + b * b;
                if s > 9.0 {
                    let t = 3.0 / s.sqrt();
                    m[i] = t * a * d[i];
                    m[i + 1] = t * b * d[i];
                }
            }
        }
        Self { xs, ys, slopes: m }
    }

    /// Uniform sampling of `f` on `[a, b]` with `n` nodes.
    pub fn from_fn<F: Fn(f64) -> f64>(a: f64, b: f64, n: usize, f: F) -> Self {
        let xs: Vec<f64> = (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect();
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        Self::new(xs, ys)
    }

    pub fn min_x(&self) -> f64 {
        self.xs[0]
    }

    pub fn max_x(&self) -> f64 {
        *self.xs.last().unwrap()
    }

    /// Evaluate; clamps outside the table range.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let i = match self.xs.partition_point(|&v| v <= x) {
            0 => 0,
            k => k - 1,
        };
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.ys[i] + h10 * h * self.slopes[i] + h01 * self.ys[i + 1] + h11 * h * self.slopes[i + 1]
    }

    /// Largest |secant slope| of the underlying data, a Lipschitz bound for
    /// the interpolant (monotone cubics do not overshoot their data slopes
    /// by more than the limiter factor 3).
    pub fn lipschitz_bound(&self) -> f64 {
        let mut lip: f64 = 0.0;
        for i in 0..self.xs.len() - 1 {
            lip = lip.max(((self.ys[i + 1] - self.ys[i]) / (self.xs[i + 1] - self.xs[i])).abs());
        }
        3.0 * lip
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_nodes() {
        let t = MonotoneCubic::from_fn(0.0, 1.0, 11, |x| x * x);
        for i in 0..11 {
            let x = i as f64 / 10.0;
            assert!((t.eval(x) - x * x).abs() < 1e-14);
        }
    }

    #[test]
    fn preserves_monotonicity() {
        let t = MonotoneCubic::from_fn(0.0, 10.0, 41, |x| (-x).exp());
        let mut prev = f64::INFINITY;
        for i in 0..4000 {
            let v = t.eval(10.0 * i as f64 / 3999.0);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn clamps_out_of_range() {
        let t = MonotoneCubic::from_fn(1.0, 2.0, 5, |x| x);
        assert_eq!(t.eval(0.0), 1.0);
        assert_eq!(t.eval(3.0), 2.0);
    }
}

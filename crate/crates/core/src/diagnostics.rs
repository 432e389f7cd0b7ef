//! Numerical probes of the kernel's geometry: the conditionally positive
//! definite quadratic form, the ReLU/energy-distance identity and kernel
//! weight fields on a planar grid.

use std::io::Write;

use ndarray::Array2;

use crate::ddouble::DoubleDouble as Dd;
use crate::error::{Error, Result};
use crate::real::relu;
use crate::types::{Projection, Variant};

/// Both forms of the quadratic form of a zero-sum vector.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CpdForm {
    /// `-sum_ij g_i g_j relu(x_i - x_j)`
    pub relu_form: f64,
    /// `-1/2 sum_ij g_i g_j |x_i - x_j|`
    pub energy_form: f64,
}

/// Absolute tolerance on `sum(gamma)`, scaled by `max(1, |gamma|_1)`.
pub const ZERO_SUM_TOLERANCE: f64 = 1e-12;

/// Evaluates the ReLU quadratic form of `gamma` at the points `x`.
///
/// For zero-sum `gamma` the antisymmetric half of `relu(x_i - x_j)` cancels,
/// leaving the energy-distance form, which is positive unless `gamma = 0`.
pub fn cpd_quadratic_form(x: &[f64], gamma: &[f64]) -> Result<CpdForm> {
    if x.len() != gamma.len() {
        return Err(Error::shape(format!(
            "{} points but {} weights",
            x.len(),
            gamma.len()
        )));
    }
    if let Some(i) = x.iter().chain(gamma).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "cpd input",
            index: i,
        });
    }
    let l1: f64 = gamma.iter().map(|g| g.abs()).sum();
    let sum: f64 = gamma.iter().sum();
    if sum.abs() > ZERO_SUM_TOLERANCE * l1.max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "weights must sum to zero, sum is {sum:e}"
        )));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Precondition(format!("point {} appears twice", w[0])));
    }
    // double-double sums: products and differences of f64s are exact there,
    // so the two forms agree far below f64 rounding of either
    let (mut relu_sum, mut abs_sum) = (Dd::ZERO, Dd::ZERO);
    for (&xi, &gi) in x.iter().zip(gamma) {
        for (&xj, &gj) in x.iter().zip(gamma) {
            let w = Dd::from(gi) * Dd::from(gj);
            let diff = Dd::from(xi) - Dd::from(xj);
            relu_sum += w * diff.relu();
            abs_sum += w * diff.abs();
        }
    }
    Ok(CpdForm {
        relu_form: 0.0 - relu_sum.to_f64(),
        energy_form: 0.0 - 0.5 * abs_sum.to_f64(),
    })
}

/// Largest deviation of `relu(x - y)` from `|x - y|/2 + (x - y)/2`.
pub fn relu_energy_identity_check(pairs: &[(f64, f64)]) -> f64 {
    pairs
        .iter()
        .map(|&(x, y)| {
            let d = x - y;
            (relu(d) - (d.abs() / 2.0 + d / 2.0)).abs()
        })
        .fold(0.0, f64::max)
}

/// Kernel value at score difference `delta = query - key`.
pub fn kernel_value(variant: Variant, bandwidth: f64, delta: f64) -> f64 {
    match variant {
        Variant::Relu => relu(delta),
        Variant::Bump => {
            (relu(delta + bandwidth) + relu(delta - bandwidth) - 2.0 * relu(delta)) / bandwidth
        }
    }
}

/// Regular lattice `[x_min, x_max] x [y_min, y_max]` with `nx * ny` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Grid {
    pub fn square(half_width: f64, points: usize) -> Self {
        Self {
            x_min: -half_width,
            x_max: half_width,
            y_min: -half_width,
            y_max: half_width,
            nx: points,
            ny: points,
        }
    }

    fn coord(lo: f64, hi: f64, count: usize, i: usize) -> f64 {
        if count == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (count - 1) as f64
        }
    }

    /// Lattice points, `y` outer and `x` inner.
    pub fn points(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.nx * self.ny, 2));
        for j in 0..self.ny {
            for i in 0..self.nx {
                let r = j * self.nx + i;
                out[[r, 0]] = Self::coord(self.x_min, self.x_max, self.nx, i);
                out[[r, 1]] = Self::coord(self.y_min, self.y_max, self.ny, j);
            }
        }
        out
    }
}

/// Raw kernel weights between a fixed query and keys placed on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `(x, y, weight)` rows, `y` outer and `x` inner.
    pub rows: Vec<(f64, f64, f64)>,
}

impl Heatmap {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Internal(format!("writing heatmap: {e}"));
        w.write_record(["x", "y", "weight"]).map_err(io)?;
        for &(x, y, v) in &self.rows {
            w.write_record([x.to_string(), y.to_string(), v.to_string()])
                .map_err(io)?;
        }
        w.flush()
            .map_err(|e| Error::Internal(format!("writing heatmap: {e}")))
    }
}

/// Kernel weight field of `query` against keys at every grid point, all
/// scored by output `head` of `projection`. Weights are unnormalized.
pub fn kernel_heatmap(
    projection: &Projection,
    head: usize,
    query: [f64; 2],
    grid: &Grid,
    variant: Variant,
    bandwidth: f64,
) -> Result<Heatmap> {
    projection.validate(2)?;
    if head >= projection.head_count() {
        return Err(Error::config(format!(
            "head {head} out of range for {} projection outputs",
            projection.head_count()
        )));
    }
    if grid.nx == 0 || grid.ny == 0 {
        return Err(Error::EmptyInput("heatmap grid"));
    }
    if variant == Variant::Bump && !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::config(format!(
            "bump bandwidth must be positive, got {bandwidth}"
        )));
    }
    let q = Array2::from_shape_vec((1, 2), query.to_vec()).expect("one row");
    let q_score = projection.scores(q.view(), head)[0];
    let pts = grid.points();
    let keys = projection.scores(pts.view(), head);
    let rows = pts
        .outer_iter()
        .zip(keys.iter())
        .map(|(p, &k)| (p[0], p[1], kernel_value(variant, bandwidth, q_score - k)))
        .collect();
    Ok(Heatmap { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_weights_give_zero() {
        let f = cpd_quadratic_form(&[0.0, 1.0, 3.0], &[0.0; 3]).unwrap();
        assert_eq!(f.relu_form, 0.0);
        assert_eq!(f.energy_form, 0.0);
    }

    #[test]
    fn two_point_value() {
        let f = cpd_quadratic_form(&[0.0, 1.0], &[1.0, -1.0]).unwrap();
        assert_eq!(f.relu_form, 1.0);
        assert_eq!(f.energy_form, 1.0);
    }

    #[test]
    fn nonzero_sum_rejected() {
        assert!(matches!(
            cpd_quadratic_form(&[0.0, 1.0], &[1.0, -0.5]),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn repeated_point_rejected() {
        assert!(matches!(
            cpd_quadratic_form(&[1.0, 1.0], &[1.0, -1.0]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn identity_exact_on_examples() {
        assert_eq!(
            relu_energy_identity_check(&[(3.0, 1.0), (1.0, 3.0), (0.1, 0.7), (-2.5, 1e300)]),
            0.0
        );
    }

    #[test]
    fn bump_heatmap_support_and_peak() {
        let proj = Projection::linear(array![0.6, 0.8], 0.0);
        let b = 0.5;
        let grid = Grid::square(2.0, 41);
        let query = [0.3, -0.2];
        let q = 0.6 * query[0] + 0.8 * query[1];
        let map = kernel_heatmap(&proj, 0, query, &grid, Variant::Bump, b).unwrap();
        assert_eq!(map.rows.len(), 41 * 41);
        for &(x, y, w) in &map.rows {
            if (0.6 * x + 0.8 * y - q).abs() >= b {
                assert!(w.abs() < 1e-15, "({x}, {y}) -> {w}");
            }
        }
        assert_eq!(kernel_value(Variant::Bump, b, 0.0), 1.0);
    }

    #[test]
    fn relu_heatmap_monotone_along_direction() {
        let proj = Projection::linear(array![1.0, 0.0], 0.0);
        let grid = Grid::square(1.0, 21);
        let map = kernel_heatmap(&proj, 0, [0.0, 0.0], &grid, Variant::Relu, 0.0).unwrap();
        // keys further along the direction have smaller query - key
        for row in map.rows.chunks(21) {
            assert!(row.windows(2).all(|w| w[0].2 >= w[1].2));
        }
    }

    #[test]
    fn csv_header() {
        let map = Heatmap {
            rows: vec![(0.0, 1.0, 0.5)],
        };
        let mut buf = Vec::new();
        map.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x,y,weight\n0,1,0.5\n");
    }
}

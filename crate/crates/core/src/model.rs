//! Loss families and their exact derivatives on a data shard.
//!
//! Every loss is a per-sample mean over the shard, `L(θ) = (1/n) Σᵢ ℓ(θ; zᵢ)`.
//! The squared-error loss is deliberately *not* halved, `ℓ = (y − xᵀθ)²`, so its
//! gradient and Hessian carry a factor of 2.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Covariates and responses held by one machine.
#[derive(Debug, Clone, PartialEq)]
pub struct DataShard {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl DataShard {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidShard("shard has no samples".into()));
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidShard("shard has no features".into()));
        }
        if y.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                found: y.len(),
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("shard data"));
        }
        Ok(Self { x, y })
    }

    /// Builds a shard from row-major covariates.
    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: bad.len(),
            });
        }
        let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Self::new(x, DVector::from_vec(y))
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Stacks shards row-wise, in the order given.
    pub fn concat<'a, I>(shards: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a DataShard>,
    {
        let shards: Vec<&DataShard> = shards.into_iter().collect();
        let first = shards
            .first()
            .ok_or_else(|| Error::InvalidShard("nothing to concatenate".into()))?;
        let d = first.d();
        if let Some(bad) = shards.iter().find(|s| s.d() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: bad.d(),
            });
        }
        let n: usize = shards.iter().map(|s| s.n()).sum();
        let mut x = DMatrix::zeros(n, d);
        let mut y = DVector::zeros(n);
        let mut offset = 0;
        for s in &shards {
            x.rows_mut(offset, s.n()).copy_from(&s.x);
            y.rows_mut(offset, s.n()).copy_from(&s.y);
            offset += s.n();
        }
        Ok(Self { x, y })
    }

    /// Splits into `k` consecutive shards of equal size.
    pub fn split_equal(&self, k: usize) -> Result<Vec<DataShard>> {
        if k == 0 || !self.n().is_multiple_of(k) {
            return Err(Error::InvalidShard(format!(
                "{} samples cannot be split into {k} equal shards",
                self.n()
            )));
        }
        let n = self.n() / k;
        Ok((0..k)
            .map(|j| DataShard {
                x: self.x.rows(j * n, n).into_owned(),
                y: self.y.rows(j * n, n).into_owned(),
            })
            .collect())
    }

    /// Rows `start..start + len` as a new shard.
    pub fn slice(&self, start: usize, len: usize) -> Result<DataShard> {
        if len == 0 || start + len > self.n() {
            return Err(Error::InvalidShard(format!(
                "row range {start}..{} out of bounds for {} samples",
                start + len,
                self.n()
            )));
        }
        Ok(DataShard {
            x: self.x.rows(start, len).into_owned(),
            y: self.y.rows(start, len).into_owned(),
        })
    }

    /// Reads the `y,x1,...,xd` CSV layout.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0).map(str::trim) != Some("y") || headers.len() < 2 {
            return Err(Error::Parse {
                line: 1,
                message: "header must be `y,x1,...,xd`".into(),
            });
        }
        let d = headers.len() - 1;
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let line = i + 2;
            let record = record?;
            if record.len() != d + 1 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, found {}", d + 1, record.len()),
                });
            }
            let mut vals = record.iter().map(|f| {
                f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("`{f}`: {e}"),
                })
            });
            ys.push(vals.next().expect("record has d + 1 fields")?);
            rows.push(vals.collect::<Result<Vec<f64>>>()?);
        }
        Self::from_rows(&rows, ys)
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Writes the `y,x1,...,xd` CSV layout. Values use the shortest
    /// representation that parses back to the identical `f64`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.d()).map(|j| format!("x{j}")));
        wtr.write_record(&header)?;
        let mut record = Vec::with_capacity(self.d() + 1);
        for i in 0..self.n() {
            record.clear();
            record.push(self.y[i].to_string());
            record.extend(self.x.row(i).iter().map(f64::to_string));
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }
}

/// Canonical link of a generalized linear model, given by its cumulant `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    /// `φ(u) = log(1 + eᵘ)`
    Logistic,
    /// `φ(u) = eᵘ`
    Poisson,
}

impl Link {
    pub fn phi(self, u: f64) -> f64 {
        match self {
            Link::Logistic => softplus(u),
            Link::Poisson => u.exp(),
        }
    }

    pub fn phi_prime(self, u: f64) -> f64 {
        match self {
            Link::Logistic => sigmoid(u),
            Link::Poisson => u.exp(),
        }
    }

    pub fn phi_second(self, u: f64) -> f64 {
        match self {
            Link::Logistic => {
                let e = (-u.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            Link::Poisson => u.exp(),
        }
    }
}

/// `log(1 + eᵘ)` without overflow.
pub fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// A statistical loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossModel {
    /// Bernoulli negative log-likelihood with responses in {0, 1}.
    Logistic,
    /// Un-halved squared error `(y − xᵀθ)²`.
    Linear,
    /// Canonical GLM negative log-likelihood `−y·xᵀθ + φ(xᵀθ)`.
    Glm(Link),
}

impl LossModel {
    fn link(self) -> Option<Link> {
        match self {
            LossModel::Logistic => Some(Link::Logistic),
            LossModel::Glm(link) => Some(link),
            LossModel::Linear => None,
        }
    }

    fn check(self, theta: &DVector<f64>, shard: &DataShard) -> Result<()> {
        if theta.len() != shard.d() {
            return Err(Error::DimensionMismatch {
                expected: shard.d(),
                found: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        if self.link() == Some(Link::Logistic) {
            if let Some((index, &value)) = shard
                .y
                .iter()
                .enumerate()
                .find(|(_, &v)| v != 0.0 && v != 1.0)
            {
                return Err(Error::NonBinaryResponse { index, value });
            }
        }
        Ok(())
    }

    /// Validates a shard against this family once, outside any hot loop.
    pub fn validate_shard(self, shard: &DataShard) -> Result<()> {
        self.check(&DVector::zeros(shard.d()), shard)
    }

    /// Per-sample loss at linear predictor `u` with response `y`.
    #[inline]
    fn sample_loss(self, u: f64, y: f64) -> f64 {
        match self.link() {
            Some(link) => -y * u + link.phi(u),
            None => (y - u) * (y - u),
        }
    }

    /// Derivative of the per-sample loss with respect to `u`.
    #[inline]
    fn sample_dloss(self, u: f64, y: f64) -> f64 {
        match self.link() {
            Some(link) => link.phi_prime(u) - y,
            None => 2.0 * (u - y),
        }
    }

    #[inline]
    fn sample_d2loss(self, u: f64) -> f64 {
        match self.link() {
            Some(link) => link.phi_second(u),
            None => 2.0,
        }
    }

    pub fn value(self, theta: &DVector<f64>, shard: &DataShard) -> Result<f64> {
        self.check(theta, shard)?;
        let u = &shard.x * theta;
        let mut sum = 0.0;
        for (ui, yi) in u.iter().zip(shard.y.iter()) {
            sum += self.sample_loss(*ui, *yi);
        }
        let v = sum / shard.n() as f64;
        if !v.is_finite() {
            return Err(Error::NonFinite("loss value"));
        }
        Ok(v)
    }

    pub fn gradient(self, theta: &DVector<f64>, shard: &DataShard) -> Result<DVector<f64>> {
        self.check(theta, shard)?;
        let r = self.residuals(theta, shard);
        let g = shard.x.tr_mul(&r) / shard.n() as f64;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("loss gradient"));
        }
        Ok(g)
    }

    pub fn hessian(self, theta: &DVector<f64>, shard: &DataShard) -> Result<DMatrix<f64>> {
        self.check(theta, shard)?;
        let u = &shard.x * theta;
        let mut weighted = shard.x.clone();
        for (i, ui) in u.iter().enumerate() {
            let w = self.sample_d2loss(*ui);
            weighted.row_mut(i).scale_mut(w);
        }
        let mut h = shard.x.tr_mul(&weighted) / shard.n() as f64;
        symmetrize_upper(&mut h);
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("loss Hessian"));
        }
        Ok(h)
    }

    /// Row `i` is `∇ℓ(θ; zᵢ)`.
    pub fn per_sample_gradients(
        self,
        theta: &DVector<f64>,
        shard: &DataShard,
    ) -> Result<DMatrix<f64>> {
        self.check(theta, shard)?;
        let r = self.residuals(theta, shard);
        let mut g = shard.x.clone();
        for (i, ri) in r.iter().enumerate() {
            g.row_mut(i).scale_mut(*ri);
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("per-sample gradients"));
        }
        Ok(g)
    }

    /// `∂ℓ/∂u` for every sample.
    fn residuals(self, theta: &DVector<f64>, shard: &DataShard) -> DVector<f64> {
        let mut u = &shard.x * theta;
        for (ui, yi) in u.iter_mut().zip(shard.y.iter()) {
            *ui = self.sample_dloss(*ui, *yi);
        }
        u
    }
}

/// Copies the upper triangle onto the lower one.
pub(crate) fn symmetrize_upper(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for j in 0..d {
        for i in (j + 1)..d {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// The loss of one family restricted to one shard, as an optimization objective.
#[derive(Debug, Clone, Copy)]
pub struct ShardLoss<'a> {
    pub model: LossModel,
    pub shard: &'a DataShard,
}

impl<'a> ShardLoss<'a> {
    pub fn new(model: LossModel, shard: &'a DataShard) -> Self {
        Self { model, shard }
    }
}

impl crate::estimators::Smooth for ShardLoss<'_> {
    fn dim(&self) -> usize {
        self.shard.d()
    }

    fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        self.model.value(theta, self.shard)
    }

    fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.model.gradient(theta, self.shard)
    }
}

impl crate::estimators::TwiceDifferentiable for ShardLoss<'_> {
    fn hessian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.model.hessian(theta, self.shard)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn shard(rows: &[&[f64]], y: &[f64]) -> DataShard {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        DataShard::from_rows(&rows, y.to_vec()).unwrap()
    }

    #[test]
    fn logistic_at_zero_is_log2() {
        let s = shard(&[&[1.0, 2.0], &[-0.3, 0.7], &[4.0, -1.0]], &[1.0, 0.0, 1.0]);
        let v = LossModel::Logistic.value(&DVector::zeros(2), &s).unwrap();
        assert_abs_diff_eq!(v, std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn linear_noiseless_truth_has_zero_loss() {
        let theta = DVector::from_vec(vec![0.5, -2.0]);
        let rows = [[1.0, 2.0], [0.3, -0.1], [-2.0, 1.5]];
        let y: Vec<f64> = rows.iter().map(|r| 0.5 * r[0] - 2.0 * r[1]).collect();
        let s = shard(&[&rows[0], &rows[1], &rows[2]], &y);
        assert_abs_diff_eq!(
            LossModel::Linear.value(&theta, &s).unwrap(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn logistic_hand_dataset_matches_direct_summation() {
        let xs = [[0.5, -1.0], [1.5, 0.25], [-0.75, 2.0], [0.1, 0.1]];
        let ys = [1.0, 0.0, 0.0, 1.0];
        let theta = [0.8, -0.35];
        let s = shard(&[&xs[0], &xs[1], &xs[2], &xs[3]], &ys);
        // straight summation of -y u + ln(1 + e^u)
        let mut expected = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let u = x[0] * theta[0] + x[1] * theta[1];
            expected += -y * u + (1.0 + u.exp()).ln();
        }
        expected /= 4.0;
        let v = LossModel::Logistic
            .value(&DVector::from_row_slice(&theta), &s)
            .unwrap();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
    }

    #[test]
    fn logistic_single_sample_gradient_and_hessian() {
        let s = shard(&[&[1.0, 0.0]], &[1.0]);
        let zero = DVector::zeros(2);
        let g = LossModel::Logistic.gradient(&zero, &s).unwrap();
        assert_eq!(g.as_slice(), &[-0.5, 0.0]);
        let h = LossModel::Logistic.hessian(&zero, &s).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn linear_identity_design() {
        let s = shard(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]);
        let theta = DVector::from_vec(vec![1.0, 1.0]);
        let g = LossModel::Linear.gradient(&theta, &s).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 1.0]);
        let h = LossModel::Linear.hessian(&theta, &s).unwrap();
        assert_eq!(h, DMatrix::identity(2, 2));
    }

    #[test]
    fn per_sample_single_row_equals_gradient() {
        let s = shard(&[&[0.3, -1.2, 2.0]], &[1.0]);
        let theta = DVector::from_vec(vec![0.1, 0.2, -0.3]);
        let g = LossModel::Logistic.gradient(&theta, &s).unwrap();
        let rows = LossModel::Logistic
            .per_sample_gradients(&theta, &s)
            .unwrap();
        assert_eq!(rows.nrows(), 1);
        assert_abs_diff_eq!(rows.row(0).transpose(), g, epsilon = 1e-15);
    }

    #[test]
    fn rejects_non_binary_logistic_response() {
        let s = shard(&[&[1.0], &[2.0]], &[1.0, 0.5]);
        let err = LossModel::Logistic
            .value(&DVector::zeros(1), &s)
            .unwrap_err();
        assert!(matches!(err, Error::NonBinaryResponse { index: 1, .. }));
        // squared error accepts any real response
        assert!(LossModel::Linear.value(&DVector::zeros(1), &s).is_ok());
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let s = shard(&[&[1.0, 2.0]], &[1.0]);
        let err = LossModel::Linear
            .gradient(&DVector::zeros(3), &s)
            .unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                expected: 2,
                found: 3
            }
        ));
    }

    #[test]
    fn logistic_value_finite_at_extreme_margins() {
        let s = shard(&[&[1.0], &[-1.0], &[1.0], &[-1.0]], &[0.0, 1.0, 1.0, 0.0]);
        for t in [700.0, -700.0] {
            let v = LossModel::Logistic
                .value(&DVector::from_element(1, t), &s)
                .unwrap();
            assert!(v.is_finite());
            assert_abs_diff_eq!(v, 350.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn poisson_link_derivatives() {
        for u in [-3.0, 0.0, 0.7, 2.5] {
            let l = Link::Poisson;
            assert_eq!(l.phi(u), u.exp());
            assert_eq!(l.phi_prime(u), u.exp());
            assert_eq!(l.phi_second(u), u.exp());
        }
    }

    #[test]
    fn logistic_link_second_derivative_matches_sigmoid_form() {
        for u in [-30.0, -2.0, 0.0, 0.5, 12.0] {
            let p = sigmoid(u);
            assert_abs_diff_eq!(Link::Logistic.phi_second(u), p * (1.0 - p), epsilon = 1e-15);
        }
    }

    #[test]
    fn shard_validation() {
        assert!(DataShard::new(DMatrix::zeros(0, 2), DVector::zeros(0)).is_err());
        assert!(DataShard::new(DMatrix::zeros(2, 2), DVector::zeros(3)).is_err());
        let mut x = DMatrix::zeros(2, 2);
        x[(1, 1)] = f64::NAN;
        assert!(matches!(
            DataShard::new(x, DVector::zeros(2)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let s = shard(
            &[
                &[0.1, 1.0 / 3.0],
                &[-2.5e-17, 1e300],
                &[std::f64::consts::PI, -0.0],
            ],
            &[1.0, 0.0, 1.0],
        );
        let bytes = s.to_csv_bytes().unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("y,x1,x2\n"));
        let back = DataShard::read_csv(bytes.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn csv_reports_bad_line() {
        let text = "y,x1\n1,0.5\n0,abc\n";
        match DataShard::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn split_and_concat_are_inverse() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 1.0]).collect();
        let s = DataShard::from_rows(&rows, vec![0.0; 6]).unwrap();
        let parts = s.split_equal(3).unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[1].x()[(0, 0)], 2.0);
        assert_eq!(DataShard::concat(&parts).unwrap(), s);
        assert!(s.split_equal(4).is_err());
    }
}

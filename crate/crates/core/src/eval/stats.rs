//! Similarity matrices and the two-sample significance test.

use std::io::Write;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{EndxError, Result};
use crate::tensor::{Real, Tensor};

/// Pairwise inner products of the rows of `emb`.
pub fn similarity_matrix<F: Real>(emb: &Tensor<F>) -> Result<Tensor<F>> {
    if emb.rank() != 2 || emb.rows() == 0 {
        return Err(EndxError::Shape(format!("need a non-empty matrix, got {:?}", emb.shape())));
    }
    let (n, d) = (emb.rows(), emb.cols());
    let mut out = vec![F::zero(); n * n];
    F::gemm(n, d, n, emb.data(), false, emb.data(), true, F::zero(), &mut out);
    Tensor::new(&[n, n], out)
}

/// CSV with a header row and a leading column of ids.
pub fn write_similarity_csv<F: Real>(path: &Path, ids: &[String], m: &Tensor<F>) -> Result<()> {
    if m.rank() != 2 || m.rows() != ids.len() || m.cols() != ids.len() {
        return Err(EndxError::Shape(format!("{} ids for a {:?} matrix", ids.len(), m.shape())));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| EndxError::io(path, e))?);
    let quote = |s: &str| {
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    let mut text = String::from("id");
    for id in ids {
        text.push(',');
        text.push_str(&quote(id));
    }
    text.push('\n');
    for (i, id) in ids.iter().enumerate() {
        text.push_str(&quote(id));
        for v in m.row(i) {
            text.push_str(&format!(",{}", v.to_f64().unwrap()));
        }
        text.push('\n');
    }
    f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(|e| EndxError::io(path, e))
}

/// Welch's unequal-variance t-test; returns `(t, two-sided p)`.
pub fn significance_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EndxError::Invalid("need at least 2 samples per side".into()));
    }
    let moments = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = moments(a);
    let (nb, mb, vb) = moments(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb { (0.0, 1.0) } else { ((ma - mb).signum() * f64::INFINITY, 0.0) });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| EndxError::Invalid(e.to_string()))?;
    let p = 2.0 * dist.sf(t.abs());
    Ok((t, p.min(1.0)))
}

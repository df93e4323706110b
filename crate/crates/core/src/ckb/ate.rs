use statrs::distribution::{ContinuousCDF, StudentsT};

use super::CkbError;

/// Paired-difference effect estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AteEstimate {
    pub ate: f64,
    pub standard_error: f64,
    pub n_matched: usize,
    pub p_value: f64,
}

/// Mean of `y_treated - y_control` over matched pairs, with the paired
/// t-test. A single pair has undefined spread and is reported with an
/// infinite standard error and `p = 1`.
pub fn estimate_ate(pairs: &[(f64, f64)]) -> Result<AteEstimate, CkbError> {
    let n = pairs.len();
    if n == 0 {
        return Err(CkbError::Config("no matched pairs".into()));
    }
    let diffs: Vec<f64> = pairs.iter().map(|(t, c)| t - c).collect();
    let ate = diffs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(AteEstimate {
            ate,
            standard_error: f64::INFINITY,
            n_matched: 1,
            p_value: 1.0,
        });
    }
    let var = diffs.iter().map(|d| (d - ate).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let p_value = if se == 0.0 {
        if ate == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| CkbError::Config(e.to_string()))?;
        (2.0 * t.sf((ate / se).abs())).clamp(0.0, 1.0)
    };
    Ok(AteEstimate {
        ate,
        standard_error: se,
        n_matched: n,
        p_value,
    })
}

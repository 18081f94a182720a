use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::PatientRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CramersV {
    pub v: f64,
    /// Set when a margin is empty; `v` is then defined as 0.
    pub degenerate: bool,
}

/// Cramér's V of a 2×2 table `[[a, b], [c, d]]`, i.e. `sqrt(χ² / n)`.
pub fn cramers_v_table(table: [[u64; 2]; 2]) -> CramersV {
    let [[a, b], [c, d]] = table.map(|r| r.map(|x| x as f64));
    let n = a + b + c + d;
    let margins = [a + b, c + d, a + c, b + d];
    if n == 0.0 || margins.contains(&0.0) {
        return CramersV {
            v: 0.0,
            degenerate: true,
        };
    }
    let chi2 = n * (a * d - b * c).powi(2) / margins.iter().product::<f64>();
    CramersV {
        v: (chi2 / n).sqrt().min(1.0),
        degenerate: false,
    }
}

/// Presence association of two codes over `records`.
pub fn cramers_v(records: &[&PatientRecord], code_a: usize, code_b: usize) -> Result<CramersV> {
    if records.is_empty() {
        return Err(Error::InvalidInput("Cramér's V needs a non-empty sample".into()));
    }
    let mut t = [[0u64; 2]; 2];
    for r in records {
        let i = usize::from(!r.has_code(code_a));
        let j = usize::from(!r.has_code(code_b));
        t[i][j] += 1;
    }
    Ok(cramers_v_table(t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollinearPair {
    pub code_a: usize,
    pub code_b: usize,
    pub v: f64,
}

/// Code pairs among `codes` whose V exceeds `threshold`, strongest first.
pub fn collinear_pairs(records: &[&PatientRecord], codes: &[usize], threshold: f64) -> Result<Vec<CollinearPair>> {
    if records.is_empty() {
        return Err(Error::InvalidInput("Cramér's V needs a non-empty sample".into()));
    }
    let sets: Vec<Vec<usize>> = records.iter().map(|r| r.code_set()).collect();
    let has = |s: &Vec<usize>, c: usize| s.binary_search(&c).is_ok();
    let pairs: Vec<(usize, usize)> = codes
        .iter()
        .enumerate()
        .flat_map(|(i, &a)| codes[i + 1..].iter().map(move |&b| (a, b)))
        .collect();
    let mut out: Vec<CollinearPair> = pairs
        .par_iter()
        .filter_map(|&(a, b)| {
            let mut t = [[0u64; 2]; 2];
            for s in &sets {
                t[usize::from(!has(s, a))][usize::from(!has(s, b))] += 1;
            }
            let v = cramers_v_table(t);
            (!v.degenerate && v.v > threshold).then_some(CollinearPair {
                code_a: a,
                code_b: b,
                v: v.v,
            })
        })
        .collect();
    out.sort_by(|x, y| {
        y.v.total_cmp(&x.v)
            .then((x.code_a, x.code_b).cmp(&(y.code_a, y.code_b)))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let v = cramers_v_table([[30, 10], [10, 30]]);
        assert_eq!(v.v, 0.5);
        assert!(!v.degenerate);
    }

    #[test]
    fn perfect_dependence_and_degenerate_margins() {
        assert_eq!(cramers_v_table([[12, 0], [0, 31]]).v, 1.0);
        assert_eq!(cramers_v_table([[0, 9], [9, 0]]).v, 1.0);
        let d = cramers_v_table([[5, 7], [0, 0]]);
        assert!(d.degenerate && d.v == 0.0);
    }
}

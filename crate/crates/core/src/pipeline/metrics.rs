//! CMC and mean average precision under the single-query protocol.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `cmc[r - 1]` is the fraction of queries with a relevant item in the top `r`.
    pub cmc: Vec<f64>,
    pub map: f64,
}

impl Metrics {
    /// CMC at 1-based rank `r`, saturating at the gallery size.
    pub fn rank(&self, r: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[r.clamp(1, n) - 1],
        }
    }
}

impl fmt::Display for Metrics {
    /// `name<TAB>value` lines with six decimals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in [1, 5, 10] {
            writeln!(f, "rank{r}\t{:.6}", self.rank(r))?;
        }
        writeln!(f, "mAP\t{:.6}", self.map)
    }
}

/// Mean of precision@hit over the positions of relevant items.
pub fn average_precision(relevant_at: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, _) in relevant_at.iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (pos + 1) as f64;
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Scores ranked gallery lists; `rankings[q]` lists gallery indices best first.
pub fn evaluate_rankings(rankings: &[Vec<usize>], query_labels: &[u32], gallery_labels: &[u32]) -> Result<Metrics> {
    if rankings.len() != query_labels.len() {
        return Err(Error::Invalid(format!(
            "{} rankings for {} queries",
            rankings.len(),
            query_labels.len()
        )));
    }
    if rankings.is_empty() {
        return Err(Error::Invalid("no queries to evaluate".into()));
    }
    let g = gallery_labels.len();
    let mut cmc = vec![0.0; g];
    let mut ap_sum = 0.0;
    for (q, ranking) in rankings.iter().enumerate() {
        let mut seen = vec![false; g];
        if ranking.len() != g || ranking.iter().any(|&i| i >= g || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Invalid(format!("ranking of query {q} is not a permutation of the gallery")));
        }
        let relevant: Vec<bool> = ranking.iter().map(|&i| gallery_labels[i] == query_labels[q]).collect();
        let Some(first) = relevant.iter().position(|&r| r) else {
            return Err(Error::NoRelevant { index: q });
        };
        cmc[first..].iter_mut().for_each(|c| *c += 1.0);
        ap_sum += average_precision(&relevant);
    }
    let n = rankings.len() as f64;
    cmc.iter_mut().for_each(|c| *c /= n);
    Ok(Metrics { cmc, map: ap_sum / n })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        let m = evaluate_rankings(&[vec![0, 1, 2], vec![1, 0, 2]], &[5, 6], &[5, 6, 7]).unwrap();
        assert_eq!(m.rank(1), 1.0);
        assert_eq!(m.map, 1.0);
        assert_eq!(m.to_string(), "rank1\t1.000000\nrank5\t1.000000\nrank10\t1.000000\nmAP\t1.000000\n");
    }

    #[test]
    fn relevant_at_rank_two() {
        let m = evaluate_rankings(&[vec![0, 1]], &[1], &[0, 1]).unwrap();
        assert_eq!(m.map, 0.5);
        assert_eq!(m.cmc, vec![0.0, 1.0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            evaluate_rankings(&[vec![0, 1], vec![1, 0]], &[0, 9], &[0, 1]),
            Err(Error::NoRelevant { index: 1 })
        ));
        assert!(evaluate_rankings(&[vec![0, 0]], &[0], &[0, 1]).is_err());
    }
}

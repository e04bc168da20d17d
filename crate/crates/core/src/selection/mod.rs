//! Query strategies for choosing which unlabeled records to annotate.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::model::{Mode, NetworkParams};
use crate::numerics::Tensor;
use crate::rng::Rng as StreamRng;
use crate::signal::IqRecord;
use crate::training::embed_records;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Bald,
    KCenter,
    Random,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Bald => "bald",
            Strategy::KCenter => "kcenter",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bald" => Ok(Strategy::Bald),
            "kcenter" | "k-center" | "coreset" => Ok(Strategy::KCenter),
            "random" => Ok(Strategy::Random),
            other => Err(Error::config(format!("unknown strategy {other:?} (expected bald, kcenter or random)"))),
        }
    }
}

/// Chosen candidates, in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScores {
    pub strategy: Strategy,
    /// Positions in the candidate list.
    pub indices: Vec<usize>,
    /// BALD score, or pick order for the other strategies.
    pub scores: Vec<f64>,
}

fn check_budget(k: usize, pool: usize) -> Result<()> {
    if k > pool {
        return Err(Error::selection(format!("requested {k} records from a pool of {pool}")));
    }
    Ok(())
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Mutual information between prediction and dropout mask, from `T`
/// stochastic probability tables of shape `[N, M]`.
pub fn bald_from_passes(passes: &[Tensor]) -> Result<Vec<f64>> {
    if passes.len() < 2 {
        return Err(Error::config(format!("BALD needs at least 2 passes, got {}", passes.len())));
    }
    let shape = passes[0].shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "bald",
            left: vec![0, 0],
            right: shape.to_vec(),
        });
    }
    if let Some(bad) = passes.iter().find(|p| p.shape() != shape) {
        return Err(Error::Shape {
            op: "bald",
            left: shape.to_vec(),
            right: bad.shape().to_vec(),
        });
    }
    let (n, m) = (shape[0], shape[1]);
    let t = passes.len() as f64;
    let max = (m as f64).ln();
    Ok((0..n)
        .map(|i| {
            let mut mean = vec![0.0; m];
            let mut mean_entropy = 0.0;
            for pass in passes {
                let row = pass.row(i);
                mean.iter_mut().zip(row).for_each(|(a, v)| *a += v / t);
                mean_entropy += entropy(row) / t;
            }
            (entropy(&mean) - mean_entropy).clamp(0.0, max)
        })
        .collect())
}

/// BALD scores for each record from `passes` MC-dropout passes through the
/// classifier. The encoder and projection run once in eval mode.
pub fn bald_scores<R: Rng + ?Sized>(
    params: &NetworkParams,
    records: &[&IqRecord],
    passes: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if passes < 2 {
        return Err(Error::config(format!("BALD needs at least 2 passes, got {passes}")));
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let p = embed_records(params, records)?;
    let tables = (0..passes)
        .map(|_| params.classify(&p, Mode::McDropout, rng))
        .collect::<Result<Vec<_>>>()?;
    bald_from_passes(&tables)
}

/// Top-`k` scores, highest first; ties go to the lower index.
pub fn select_bald(scores: &[f64], k: usize) -> Result<CandidateScores> {
    check_budget(k, scores.len())?;
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("BALD score {i} is NaN")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(CandidateScores {
        strategy: Strategy::Bald,
        scores: order.iter().map(|&i| scores[i]).collect(),
        indices: order,
    })
}

fn unit_rows(t: &Tensor, what: &str) -> Result<Vec<Vec<f64>>> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Numeric(format!("{what} embedding {i} has norm {norm}")));
            }
            Ok(row.iter().map(|v| v / norm).collect())
        })
        .collect()
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// Greedy farthest-first selection under cosine distance.
///
/// Each pick is the candidate whose minimum distance to the labeled centers
/// and earlier picks is largest, ties going to the lower index.
pub fn kcenter_greedy(candidates: &Tensor, centers: &Tensor, k: usize) -> Result<CandidateScores> {
    let n = if candidates.is_empty() { 0 } else { candidates.rows() };
    check_budget(k, n)?;
    if centers.is_empty() || centers.rows() == 0 {
        return Err(Error::selection("K-center needs at least one labeled center"));
    }
    if n > 0 && candidates.row_len() != centers.row_len() {
        return Err(Error::Shape {
            op: "kcenter_greedy",
            left: candidates.shape().to_vec(),
            right: centers.shape().to_vec(),
        });
    }
    let cand = unit_rows(candidates, "candidate")?;
    let cent = unit_rows(centers, "center")?;
    let mut min_dist: Vec<f64> = cand
        .iter()
        .map(|c| cent.iter().map(|z| cosine_distance(c, z)).fold(f64::INFINITY, f64::min))
        .collect();
    let mut taken = vec![false; n];
    let mut indices = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            if best.is_none_or(|b| min_dist[i] > min_dist[b]) {
                best = Some(i);
            }
        }
        let pick = best.expect("budget checked");
        taken[pick] = true;
        indices.push(pick);
        for i in 0..n {
            let d = cosine_distance(&cand[i], &cand[pick]);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    Ok(CandidateScores {
        strategy: Strategy::KCenter,
        scores: (0..k).map(|i| i as f64).collect(),
        indices,
    })
}

/// Uniform sample of `k` positions without replacement.
pub fn select_random(pool_size: usize, k: usize, seed: u64) -> Result<CandidateScores> {
    check_budget(k, pool_size)?;
    let mut rng = StreamRng::seed_from_u64(seed);
    let indices = rand::seq::index::sample(&mut rng, pool_size, k).into_vec();
    Ok(CandidateScores {
        strategy: Strategy::Random,
        scores: (0..k).map(|i| i as f64).collect(),
        indices,
    })
}

pub const SELECTION_CSV_HEADER: &str = "round,strategy,index,score";

/// CSV rows for one round; `ids` maps candidate positions to record ids.
pub fn selection_csv_rows(round: usize, picked: &CandidateScores, ids: &[usize]) -> String {
    picked
        .indices
        .iter()
        .zip(&picked.scores)
        .map(|(&i, s)| format!("{round},{},{},{s}\n", picked.strategy, ids[i]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn rows(v: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(v).unwrap()
    }

    #[test]
    fn bald_examples() {
        let p = rows(&[vec![0.3, 0.7], vec![0.5, 0.5]]);
        assert_eq!(bald_from_passes(&[p.clone(), p.clone(), p]).unwrap(), [0.0, 0.0]);
        let a = rows(&[vec![1.0, 0.0]]);
        let b = rows(&[vec![0.0, 1.0]]);
        let s = bald_from_passes(&[a.clone(), b]).unwrap();
        assert!((s[0] - 2f64.ln()).abs() < 1e-15);
        assert!(bald_from_passes(&[a]).is_err());
    }

    #[test]
    fn bald_selection_examples() {
        let picked = select_bald(&[0.1, 0.9, 0.5], 2).unwrap();
        assert_eq!(picked.indices, [1, 2]);
        assert_eq!(select_bald(&[0.2, 0.2, 0.2], 3).unwrap().indices, [0, 1, 2]);
        assert!(select_bald(&[0.1], 2).is_err());
    }

    #[test]
    fn kcenter_examples() {
        let center = rows(&[vec![1.0, 0.0]]);
        let cand = rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]);
        assert_eq!(kcenter_greedy(&cand, &center, 1).unwrap().indices, [1]);
        assert_eq!(kcenter_greedy(&cand, &center, 2).unwrap().indices, [1, 0]);
        assert!(kcenter_greedy(&cand, &center, 3).is_err());
        let zero = rows(&[vec![0.0, 0.0]]);
        assert!(kcenter_greedy(&zero, &center, 1).is_err());
    }

    #[test]
    fn random_examples() {
        let all = select_random(10, 10, 4).unwrap();
        let mut sorted = all.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(select_random(50, 7, 9).unwrap(), select_random(50, 7, 9).unwrap());
        let mut seen = [false; 30];
        for seed in 0..100 {
            for i in select_random(30, 3, seed).unwrap().indices {
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert!(select_random(3, 4, 0).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [Strategy::Bald, Strategy::KCenter, Strategy::Random] {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("entropy".parse::<Strategy>().is_err());
    }

    #[test]
    fn csv_rows_use_record_ids() {
        let picked = CandidateScores {
            strategy: Strategy::KCenter,
            indices: vec![1, 0],
            scores: vec![0.0, 1.0],
        };
        assert_eq!(selection_csv_rows(2, &picked, &[40, 17]), "2,kcenter,17,0\n2,kcenter,40,1\n");
    }

    proptest! {
        #[test]
        fn bald_is_bounded(raw in proptest::collection::vec(0.01f64..1.0, 4 * 3 * 5)) {
            let (t, n, m) = (4, 3, 5);
            let passes: Vec<Tensor> = (0..t)
                .map(|p| {
                    let rs: Vec<Vec<f64>> = (0..n)
                        .map(|i| {
                            let row = &raw[(p * n + i) * m..(p * n + i + 1) * m];
                            let s: f64 = row.iter().sum();
                            row.iter().map(|v| v / s).collect()
                        })
                        .collect();
                    rows(&rs)
                })
                .collect();
            for s in bald_from_passes(&passes).unwrap() {
                prop_assert!((0.0..=(m as f64).ln()).contains(&s));
            }
        }

        #[test]
        fn kcenter_min_distance_never_grows(
            pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.1f64..1.0), 2..20),
            k in 1usize..8,
        ) {
            let cand = rows(&pts.iter().map(|&(a, b, c)| vec![a, b, c]).collect::<Vec<_>>());
            let center = rows(&[vec![0.0, 0.0, 1.0]]);
            let k = k.min(pts.len());
            let picked = kcenter_greedy(&cand, &center, k).unwrap();
            let unit = unit_rows(&cand, "c").unwrap();
            let mut chosen = unit_rows(&center, "z").unwrap();
            let mut last = f64::INFINITY;
            for &i in &picked.indices {
                let d = chosen.iter().map(|z| cosine_distance(&unit[i], z)).fold(f64::INFINITY, f64::min);
                prop_assert!(d <= last + 1e-12);
                last = d;
                chosen.push(unit[i].clone());
            }
            let mut uniq = picked.indices.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), k);
        }

        #[test]
        fn kcenter_is_scale_free(
            pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..20),
            scale in 0.01f64..100.0,
        ) {
            let cand: Vec<Vec<f64>> = pts.iter().map(|&(a, b)| vec![a + 0.01, b]).collect();
            let center = vec![vec![0.3, -0.2]];
            let k = cand.len().min(5);
            let base = kcenter_greedy(&rows(&cand), &rows(&center), k).unwrap();
            let scaled: Vec<Vec<f64>> = cand.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
            let center_scaled: Vec<Vec<f64>> = center.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
            let other = kcenter_greedy(&rows(&scaled), &rows(&center_scaled), k).unwrap();
            prop_assert_eq!(base.indices, other.indices);
        }
    }
}

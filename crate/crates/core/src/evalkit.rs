//! Leave-one-out evaluation with HR@N and NDCG@N, overall and per item
//! coldness bucket.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::corpus::{Coldness, ColdnessBuckets, SplitPair};
use crate::error::{Error, Result};
use crate::mathcore::RandomStream;
use crate::rankers::RankingModel;

pub const DEFAULT_TOP_N: usize = 10;

/// `1` when `truth` is among the first `n` entries of `ranked`.
pub fn hr_at_n(ranked: &[u32], truth: u32, n: usize) -> f64 {
    match ranked.iter().take(n).position(|&i| i == truth) {
        Some(_) => 1.0,
        None => 0.0,
    }
}

/// `1/log₂(rank + 1)` for a 1-based rank within the first `n`, else `0`.
pub fn ndcg_at_n(ranked: &[u32], truth: u32, n: usize) -> f64 {
    match ranked.iter().take(n).position(|&i| i == truth) {
        Some(p) => gain(p + 1),
        None => 0.0,
    }
}

fn gain(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidatePolicy {
    /// Every item except the user's training positives.
    All,
    /// The held-out item plus `m` uniformly drawn non-interacted items.
    Sampled(usize),
}

impl fmt::Display for CandidatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CandidatePolicy::All => f.write_str("all"),
            CandidatePolicy::Sampled(m) => write!(f, "sampled:{m}"),
        }
    }
}

impl FromStr for CandidatePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(CandidatePolicy::All);
        }
        s.strip_prefix("sampled:")
            .and_then(|m| m.parse().ok())
            .map(CandidatePolicy::Sampled)
            .ok_or_else(|| {
                Error::Config(format!(
                    "candidate policy must be `all` or `sampled:M`, got `{s}`"
                ))
            })
    }
}

/// Anything that can score every item for a user.
pub trait Scorer {
    fn user_scores(&self, u: usize) -> Vec<f64>;
}

impl Scorer for RankingModel {
    fn user_scores(&self, u: usize) -> Vec<f64> {
        self.scores_for_user(u)
    }
}

impl<F: Fn(usize) -> Vec<f64>> Scorer for F {
    fn user_scores(&self, u: usize) -> Vec<f64> {
        self(u)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub hr: f64,
    pub ndcg: f64,
    pub users: usize,
}

/// Per-user outcome, in user-id order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UserOutcome {
    pub user: u32,
    pub truth: u32,
    pub rank: usize,
    pub hr: f64,
    pub ndcg: f64,
}

fn aggregate<'a>(outcomes: impl Iterator<Item = &'a UserOutcome>) -> Metrics {
    let mut m = Metrics::default();
    for o in outcomes {
        m.hr += o.hr;
        m.ndcg += o.ndcg;
        m.users += 1;
    }
    if m.users > 0 {
        m.hr /= m.users as f64;
        m.ndcg /= m.users as f64;
    }
    m
}

/// 1-based rank of `truth` among `candidates` under the shared ordering
/// (descending score, ties to the lower id).
fn rank_of(scores: &[f64], truth: u32, candidates: impl Iterator<Item = u32>) -> usize {
    let st = scores[truth as usize];
    1 + candidates
        .filter(|&c| c != truth)
        .filter(|&c| {
            let sc = scores[c as usize];
            sc > st || (sc == st && c < truth)
        })
        .count()
}

/// Ranks each test user's held-out item and scores it.
pub fn user_outcomes(
    scorer: &dyn Scorer,
    split: &SplitPair,
    n: usize,
    policy: CandidatePolicy,
    stream: &RandomStream,
) -> Result<Vec<UserOutcome>> {
    let train_pos = split.train.user_positives();
    let n_items = split.train.n_items();
    let mut out = Vec::with_capacity(split.test.len());
    for &(u, truth) in &split.test {
        let exclude: &BTreeSet<u32> = &train_pos[u as usize];
        let scores = scorer.user_scores(u as usize);
        let (rank, pool) = match policy {
            CandidatePolicy::All => {
                let cands = (0..n_items as u32).filter(|i| !exclude.contains(i));
                let pool = n_items - exclude.len() + usize::from(exclude.contains(&truth));
                (rank_of(&scores, truth, cands), pool)
            }
            CandidatePolicy::Sampled(m) => {
                let mut s = stream.derive_indexed("user", u as u64);
                let eligible: Vec<u32> = (0..n_items as u32)
                    .filter(|&i| i != truth && !exclude.contains(&i))
                    .collect();
                let take = m.min(eligible.len());
                let picks = s.sample_distinct(eligible.len(), take);
                (
                    rank_of(&scores, truth, picks.iter().map(|&p| eligible[p])),
                    take + 1,
                )
            }
        };
        if pool < n {
            return Err(Error::domain(format!(
                "user {u} has {pool} candidates, fewer than N = {n}"
            )));
        }
        let (hr, ndcg) = if rank <= n {
            (1.0, gain(rank))
        } else {
            (0.0, 0.0)
        };
        out.push(UserOutcome {
            user: u,
            truth,
            rank,
            hr,
            ndcg,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelResult {
    pub name: String,
    pub overall: Metrics,
    /// Present only when a coldness report was requested; empty buckets are
    /// `None`.
    pub buckets: Option<Vec<(Coldness, Option<Metrics>)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub policy: CandidatePolicy,
    pub seed: u64,
    pub rows: Vec<ModelResult>,
    /// Resolved configuration echoed into every rendering.
    pub provenance: Vec<(String, String)>,
}

/// Overall metrics of one model.
pub fn evaluate(
    name: &str,
    scorer: &dyn Scorer,
    split: &SplitPair,
    n: usize,
    policy: CandidatePolicy,
    stream: &RandomStream,
) -> Result<ModelResult> {
    let outcomes = user_outcomes(scorer, split, n, policy, stream)?;
    Ok(ModelResult {
        name: name.to_string(),
        overall: aggregate(outcomes.iter()),
        buckets: None,
    })
}

/// Overall metrics plus metrics per coldness bucket of the held-out item.
pub fn coldness_report(
    name: &str,
    scorer: &dyn Scorer,
    split: &SplitPair,
    buckets: &ColdnessBuckets,
    n: usize,
    policy: CandidatePolicy,
    stream: &RandomStream,
) -> Result<ModelResult> {
    let outcomes = user_outcomes(scorer, split, n, policy, stream)?;
    let per_bucket = Coldness::ALL
        .iter()
        .map(|&b| {
            let m = aggregate(outcomes.iter().filter(|o| buckets.bucket(o.truth) == b));
            (b, (m.users > 0).then_some(m))
        })
        .collect();
    Ok(ModelResult {
        name: name.to_string(),
        overall: aggregate(outcomes.iter()),
        buckets: Some(per_bucket),
    })
}

fn improvement(value: f64, base: f64) -> String {
    if base == 0.0 {
        "n/a".into()
    } else {
        format!("{:+.2}%", 100.0 * (value - base) / base)
    }
}

impl EvalReport {
    pub fn new(n: usize, policy: CandidatePolicy, seed: u64) -> Self {
        EvalReport {
            n,
            policy,
            seed,
            rows: Vec::new(),
            provenance: Vec::new(),
        }
    }

    fn header_lines(&self, prefix: &str, out: &mut String) {
        let _ = writeln!(out, "{prefix}top_n = {}", self.n);
        let _ = writeln!(out, "{prefix}candidates = {}", self.policy);
        let _ = writeln!(out, "{prefix}seed = {}", self.seed);
        for (k, v) in &self.provenance {
            let _ = writeln!(out, "{prefix}{k} = {v}");
        }
    }

    /// Column labels and per-row cells; the improvement columns compare
    /// against the first row.
    fn cells(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let n = self.n;
        let mut head = vec![
            "model".to_string(),
            "users".to_string(),
            format!("HR@{n}"),
            format!("NDCG@{n}"),
        ];
        let with_delta = self.rows.len() > 1;
        if with_delta {
            head.push(format!("dHR@{n}"));
            head.push(format!("dNDCG@{n}"));
        }
        let bucketed = self.rows.iter().any(|r| r.buckets.is_some());
        if bucketed {
            for b in Coldness::ALL {
                head.push(format!("HR@{n}:{}", b.label()));
                head.push(format!("NDCG@{n}:{}", b.label()));
            }
        }
        let base = self.rows.first().map(|r| r.overall);
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.name.clone(), r.overall.users.to_string()];
                if r.overall.users == 0 {
                    cells.extend(["n/a".to_string(), "n/a".to_string()]);
                } else {
                    cells.push(format!("{:.4}", r.overall.hr));
                    cells.push(format!("{:.4}", r.overall.ndcg));
                }
                if with_delta {
                    let b = base.unwrap();
                    cells.push(improvement(r.overall.hr, b.hr));
                    cells.push(improvement(r.overall.ndcg, b.ndcg));
                }
                if bucketed {
                    for b in Coldness::ALL {
                        let m = r
                            .buckets
                            .as_ref()
                            .and_then(|bs| bs.iter().find(|(c, _)| *c == b))
                            .and_then(|(_, m)| *m);
                        match m {
                            Some(m) => {
                                cells.push(format!("{:.4}", m.hr));
                                cells.push(format!("{:.4}", m.ndcg));
                            }
                            None => cells.extend(["-".to_string(), "-".to_string()]),
                        }
                    }
                }
                cells
            })
            .collect();
        (head, rows)
    }

    /// Aligned plain-text table preceded by the provenance block.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        self.header_lines("# ", &mut out);
        let (head, rows) = self.cells();
        let widths: Vec<usize> = (0..head.len())
            .map(|c| {
                rows.iter()
                    .map(|r| r[c].len())
                    .chain([head[c].len()])
                    .max()
                    .unwrap()
            })
            .collect();
        let line = |cells: &[String], out: &mut String| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| {
                    if c == 0 {
                        format!("{s:<w$}")
                    } else {
                        format!("{s:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  "));
        };
        line(&head, &mut out);
        for r in &rows {
            line(r, &mut out);
        }
        if self.rows.iter().any(|r| r.overall.users == 0) {
            out.push_str("# warning: at least one model was evaluated on zero test users\n");
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        self.header_lines("# ", &mut out);
        let (head, rows) = self.cells();
        let _ = writeln!(out, "{}", head.join("\t"));
        for r in rows {
            let _ = writeln!(out, "{}", r.join("\t"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{coldness_buckets, InteractionLog, Record};
    use crate::rankers::{recommend_topn, Candidates, ModelKind};
    use proptest::prelude::*;

    #[test]
    fn hit_ratio_examples() {
        let ranked: Vec<u32> = (0..20).collect();
        assert_eq!(hr_at_n(&ranked, 0, 10), 1.0);
        assert_eq!(hr_at_n(&ranked, 10, 10), 0.0);
        assert_eq!(hr_at_n(&ranked, 99, 10), 0.0);
    }

    #[test]
    fn ndcg_examples() {
        let ranked: Vec<u32> = (0..20).collect();
        assert_eq!(ndcg_at_n(&ranked, 0, 10), 1.0);
        assert!((ndcg_at_n(&ranked, 1, 10) - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert_eq!(ndcg_at_n(&ranked, 15, 10), 0.0);
    }

    fn split_for(users: u32, items: u32, stream: &mut RandomStream) -> SplitPair {
        // each user likes 3 random items and sees 2 more
        let records = (0..users)
            .map(|u| {
                let picks: Vec<u32> = stream
                    .sample_distinct(items as usize, 5)
                    .into_iter()
                    .map(|i| i as u32)
                    .collect();
                Record::new(u, picks, vec![true, true, true, false, false])
            })
            .collect();
        let log = InteractionLog::from_records(users as usize, items as usize, records).unwrap();
        crate::corpus::leave_one_out_split(&log, stream).unwrap()
    }

    #[test]
    fn oracle_and_adversary() {
        let mut s = RandomStream::new(1);
        let split = split_for(30, 40, &mut s);
        let truth: Vec<u32> = {
            let mut t = vec![0; 30];
            for &(u, i) in &split.test {
                t[u as usize] = i;
            }
            t
        };
        let oracle = |u: usize| {
            let mut v = vec![0.0; 40];
            v[truth[u] as usize] = f64::INFINITY;
            v
        };
        let adversary = |u: usize| {
            let mut v = vec![0.0; 40];
            v[truth[u] as usize] = f64::NEG_INFINITY;
            v
        };
        let stream = RandomStream::new(2);
        for policy in [CandidatePolicy::All, CandidatePolicy::Sampled(20)] {
            let r = evaluate("oracle", &oracle, &split, 10, policy, &stream).unwrap();
            assert_eq!((r.overall.hr, r.overall.ndcg), (1.0, 1.0));
            let r = evaluate("adv", &adversary, &split, 10, policy, &stream).unwrap();
            assert_eq!((r.overall.hr, r.overall.ndcg), (0.0, 0.0));
        }
    }

    #[test]
    fn random_scorer_hits_one_in_ten() {
        // HR@10 over 100 candidates is Bernoulli(0.1) per user
        let mut s = RandomStream::new(3);
        let users = 2500;
        let split = split_for(users, 400, &mut s);
        let noise = |u: usize| RandomStream::new(1000 + u as u64).standard_normal_vec(400);
        let r = evaluate(
            "random",
            &noise,
            &split,
            10,
            CandidatePolicy::Sampled(99),
            &RandomStream::new(4),
        )
        .unwrap();
        let sigma = (0.1 * 0.9 / r.overall.users as f64).sqrt();
        assert_eq!(r.overall.users, users as usize);
        assert!((r.overall.hr - 0.1).abs() < 3.0 * sigma, "{}", r.overall.hr);
    }

    #[test]
    fn sampled_evaluation_is_deterministic() {
        let mut s = RandomStream::new(5);
        let split = split_for(50, 60, &mut s);
        let noise = |u: usize| RandomStream::new(u as u64).standard_normal_vec(60);
        let a = user_outcomes(
            &noise,
            &split,
            10,
            CandidatePolicy::Sampled(30),
            &RandomStream::new(6),
        )
        .unwrap();
        let b = user_outcomes(
            &noise,
            &split,
            10,
            CandidatePolicy::Sampled(30),
            &RandomStream::new(6),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rank_agrees_with_recommend_topn() {
        let mut s = RandomStream::new(7);
        let split = split_for(20, 30, &mut s);
        let model = crate::rankers::train_model(
            ModelKind::ItemKnn,
            &split.train,
            &crate::rankers::RankerHyper::default(),
            &mut s,
        )
        .unwrap();
        let pos = split.train.user_positives();
        let outcomes = user_outcomes(&model, &split, 10, CandidatePolicy::All, &s).unwrap();
        for o in outcomes {
            let ranked = recommend_topn(
                &model,
                o.user as usize,
                Candidates::All {
                    exclude: &pos[o.user as usize],
                },
                10,
            )
            .unwrap();
            assert_eq!(o.hr, hr_at_n(&ranked, o.truth, 10));
            assert_eq!(o.ndcg, ndcg_at_n(&ranked, o.truth, 10));
        }
    }

    #[test]
    fn coldness_buckets_partition_users() {
        let mut s = RandomStream::new(8);
        let split = split_for(200, 50, &mut s);
        let buckets = coldness_buckets(&split.train, 5, 15).unwrap();
        let noise = |u: usize| RandomStream::new(u as u64).standard_normal_vec(50);
        let r =
            coldness_report("m", &noise, &split, &buckets, 10, CandidatePolicy::All, &s).unwrap();
        let total: usize = r
            .buckets
            .as_ref()
            .unwrap()
            .iter()
            .filter_map(|(_, m)| m.map(|m| m.users))
            .sum();
        assert_eq!(total, r.overall.users);

        // a threshold nobody reaches puts every item in the low bucket
        let all_low = coldness_buckets(&split.train, 10_000, 10_000).unwrap();
        let r =
            coldness_report("m", &noise, &split, &all_low, 10, CandidatePolicy::All, &s).unwrap();
        let b = r.buckets.unwrap();
        assert!(b[0].1.is_some() && b[1].1.is_none() && b[2].1.is_none());
    }

    #[test]
    fn empty_test_set_is_flagged() {
        let log =
            InteractionLog::from_records(1, 3, vec![Record::new(0, vec![0, 1], vec![true, false])])
                .unwrap();
        let split = crate::corpus::leave_one_out_split(&log, &mut RandomStream::new(0)).unwrap();
        let zero = |_: usize| vec![0.0; 3];
        let r = evaluate(
            "m",
            &zero,
            &split,
            1,
            CandidatePolicy::All,
            &RandomStream::new(0),
        )
        .unwrap();
        assert_eq!(r.overall.users, 0);
        let mut report = EvalReport::new(1, CandidatePolicy::All, 0);
        report.rows.push(r);
        assert!(report.to_table().contains("zero test users"));
    }

    #[test]
    fn table_layout() {
        let mut report = EvalReport::new(10, CandidatePolicy::All, 3);
        report
            .provenance
            .push(("target.kind".into(), "bpr-mf".into()));
        let m = |hr, ndcg| Metrics {
            hr,
            ndcg,
            users: 600,
        };
        report.rows.push(ModelResult {
            name: "BPR".into(),
            overall: m(0.3799, 0.2),
            buckets: None,
        });
        report.rows.push(ModelResult {
            name: "CPR-BPR".into(),
            overall: m(0.4024, 0.21),
            buckets: None,
        });
        let table = report.to_table();
        assert!(table.contains("# target.kind = bpr-mf"));
        assert!(table.contains("+5.92%"), "{table}");
        let tsv = report.to_tsv();
        assert!(tsv.lines().any(|l| l.starts_with("CPR-BPR\t600\t0.4024")));
    }

    #[test]
    fn policy_parsing() {
        assert_eq!(
            "all".parse::<CandidatePolicy>().unwrap(),
            CandidatePolicy::All
        );
        assert_eq!(
            "sampled:99".parse::<CandidatePolicy>().unwrap(),
            CandidatePolicy::Sampled(99)
        );
        assert!("sampled:x".parse::<CandidatePolicy>().is_err());
    }

    proptest! {
        #[test]
        fn ndcg_never_exceeds_hr(seed in any::<u64>()) {
            let mut s = RandomStream::new(seed);
            let split = split_for(15, 25, &mut s);
            let noise = |u: usize| RandomStream::new(seed ^ u as u64).standard_normal_vec(25);
            let outcomes = user_outcomes(&noise, &split, 10, CandidatePolicy::All, &s).unwrap();
            for o in &outcomes {
                prop_assert!(o.ndcg <= o.hr);
            }
            let m = aggregate(outcomes.iter());
            prop_assert!(0.0 <= m.ndcg && m.ndcg <= m.hr && m.hr <= 1.0);
        }

        #[test]
        fn metrics_invariant_under_monotone_transform(seed in any::<u64>()) {
            let mut s = RandomStream::new(seed);
            let split = split_for(15, 25, &mut s);
            let base = |u: usize| RandomStream::new(seed ^ u as u64).standard_normal_vec(25);
            let warped = |u: usize| base(u).into_iter().map(|x| (3.0 * x).exp() + 1.0).collect::<Vec<_>>();
            let a = user_outcomes(&base, &split, 10, CandidatePolicy::All, &s).unwrap();
            let b = user_outcomes(&warped, &split, 10, CandidatePolicy::All, &s).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

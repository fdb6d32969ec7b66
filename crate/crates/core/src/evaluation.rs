//! Guess-count statistics, chance baselines, significance tests, top-N
//! category accuracy, and report files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::chance_trace;
use crate::engine::{GuessTask, GuessTrace};
use crate::error::{Error, Result};
use crate::mix_seed;

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

pub fn summarize(samples: &[f64]) -> Result<Summary> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let stderr = if n < 2 {
        0.0
    } else {
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    Ok(Summary { mean, stderr, n })
}

/// Guess counts of the traces; misses count as budget + 1.
pub fn trace_scores(traces: &[GuessTrace]) -> Vec<f64> {
    traces.iter().map(|t| t.score() as f64).collect()
}

pub fn evaluate_guesses(traces: &[GuessTrace]) -> Result<Summary> {
    summarize(&trace_scores(traces))
}

/// Averages samples within each group key first, then summarizes the
/// group means (e.g. one value per subject).
pub fn summarize_grouped(samples: &[(String, f64)]) -> Result<Summary> {
    let mut groups: std::collections::BTreeMap<&str, (f64, usize)> = Default::default();
    for (k, v) in samples {
        let e = groups.entry(k.as_str()).or_default();
        e.0 += v;
        e.1 += 1;
    }
    let means: Vec<f64> = groups.values().map(|(s, n)| s / *n as f64).collect();
    summarize(&means)
}

/// Chance guess counts: `reps` seeded random traces per task through the
/// same elimination loop the models use.
pub fn monte_carlo_chance_samples(tasks: &[GuessTask], reps: usize, seed: u64) -> Result<Vec<f64>> {
    if reps < 100 {
        return Err(Error::invalid(format!("monte carlo chance needs >= 100 reps, got {reps}")));
    }
    if tasks.is_empty() {
        return Err(Error::Empty("chance tasks"));
    }
    let mut out = Vec::with_capacity(reps * tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let task_seed = mix_seed(seed, i as u64);
        for r in 0..reps {
            out.push(chance_trace(task, mix_seed(task_seed, r as u64))?.score() as f64);
        }
    }
    Ok(out)
}

pub fn monte_carlo_chance(tasks: &[GuessTask], reps: usize, seed: u64) -> Result<Summary> {
    summarize(&monte_carlo_chance_samples(tasks, reps, seed)?)
}

/// (A_c − A_m) / A_c.
pub fn relative_performance(a_m: f64, a_c: f64) -> Result<f64> {
    if !(a_c > 0.0) {
        return Err(Error::invalid(format!("chance guesses must be positive, got {a_c}")));
    }
    Ok((a_c - a_m) / a_c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Two-tailed Welch t-test.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("welch test needs at least two samples per group"));
    }
    let moments = |s: &[f64]| {
        let n = s.len() as f64;
        let m = s.iter().sum::<f64>() / n;
        let v = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v / n)
    };
    let (ma, va) = moments(a);
    let (mb, vb) = moments(b);
    let se2 = va + vb;
    if se2 == 0.0 {
        if ma == mb {
            return Ok(TTest {
                t: 0.0,
                df: f64::INFINITY,
                p: 1.0,
            });
        }
        return Err(Error::invalid("both samples have zero variance"));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    Ok(TTest {
        t,
        df,
        p: student_t_two_tailed(t, df),
    })
}

/// P(|T| ≥ |t|) for Student's t with `df` degrees of freedom.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    if df.is_infinite() {
        return erfc(t.abs() / std::f64::consts::SQRT_2);
    }
    regularized_beta(df / (df + t * t), df / 2.0, 0.5).clamp(0.0, 1.0)
}

fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta I_x(a, b) by continued fraction.
pub fn regularized_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a) / b
    }
}

// modified Lentz evaluation
fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        for num in [
            m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m)),
            -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0)),
        ] {
            d = 1.0 + num * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + num / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

fn erfc(x: f64) -> f64 {
    // erfc(x) = Q(1/2, x²) for x ≥ 0, via the continued fraction of the
    // upper incomplete gamma
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x == 0.0 {
        return 1.0;
    }
    let (a, z) = (0.5f64, x * x);
    if z < 1.5 {
        // series for the lower part
        let mut sum = 1.0 / a;
        let mut term = sum;
        for n in 1..500 {
            term *= z / (a + n as f64);
            sum += term;
            if term < sum * 1e-16 {
                break;
            }
        }
        return 1.0 - (sum.ln() - z + a * z.ln() - ln_gamma(a)).exp();
    }
    const TINY: f64 = 1e-300;
    let mut b = z + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-z + a * z.ln() - ln_gamma(a)).exp() * h
}

/// Fraction of trials whose true class is in the top `n` of its ranking,
/// for each `n`.
pub fn topn_accuracy(rankings: &[Vec<usize>], truths: &[usize], n_values: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    if rankings.len() != truths.len() {
        return Err(Error::invalid(format!("{} rankings for {} truths", rankings.len(), truths.len())));
    }
    if rankings.is_empty() {
        return Err(Error::Empty("rankings"));
    }
    if let Some(t) = truths.iter().find(|&&t| t >= n_classes) {
        return Err(Error::invalid(format!("true class {t} outside the {n_classes}-class label space")));
    }
    let positions: Vec<usize> = rankings
        .iter()
        .zip(truths)
        .map(|(r, t)| r.iter().position(|c| c == t).unwrap_or(usize::MAX))
        .collect();
    Ok(n_values
        .iter()
        .map(|&n| positions.iter().filter(|&&p| p < n).count() as f64 / positions.len() as f64)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopNTable {
    pub t_values: Vec<usize>,
    pub n_values: Vec<usize>,
    /// `cells[i][j]` is the accuracy for `t_values[i]`, `n_values[j]`.
    pub cells: Vec<Vec<f64>>,
}

/// Accuracy grid from per-T rankings (`by_t[i]` holds one ranking per trial).
pub fn topn_table(by_t: &[(usize, Vec<Vec<usize>>)], truths: &[usize], n_values: &[usize], n_classes: usize) -> Result<TopNTable> {
    let cells = by_t
        .iter()
        .map(|(_, r)| topn_accuracy(r, truths, n_values, n_classes))
        .collect::<Result<_>>()?;
    Ok(TopNTable {
        t_values: by_t.iter().map(|(t, _)| *t).collect(),
        n_values: n_values.to_vec(),
        cells,
    })
}

impl TopNTable {
    pub fn to_csv(&self, config: &[(String, String)]) -> String {
        let mut s = config_echo(config);
        s.push_str("T");
        for n in &self.n_values {
            let _ = write!(s, ",top{n}");
        }
        s.push('\n');
        for (t, row) in self.t_values.iter().zip(&self.cells) {
            let _ = write!(s, "{t}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub t: usize,
    pub n: usize,
    pub a_m: f64,
    pub stderr: f64,
    pub a_c: f64,
    pub p_r: f64,
}

impl ReportRow {
    pub fn new(model: &str, t: usize, model_summary: Summary, a_c: f64) -> Result<Self> {
        Ok(Self {
            model: model.to_string(),
            t,
            n: model_summary.n,
            a_m: model_summary.mean,
            stderr: model_summary.stderr,
            a_c,
            p_r: relative_performance(model_summary.mean, a_c)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseP {
    pub t: usize,
    pub model_a: String,
    pub model_b: String,
    pub p: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Ordered key/value pairs echoed at the top of every output.
    pub config: Vec<(String, String)>,
    pub rows: Vec<ReportRow>,
    pub pvalues: Vec<PairwiseP>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const REPORT_HEADER: &str = "model,T,n,A_m,stderr,A_c,P_r";
pub const PVALUE_HEADER: &str = "T,model_a,model_b,p";

/// `# key=value` lines.
pub fn config_echo(config: &[(String, String)]) -> String {
    config.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

impl EvalReport {
    /// Floats use the shortest representation that round-trips exactly.
    pub fn to_csv(&self) -> String {
        let mut s = config_echo(&self.config);
        s.push_str(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.model, r.t, r.n, r.a_m, r.stderr, r.a_c, r.p_r);
        }
        if !self.pvalues.is_empty() {
            s.push('\n');
            s.push_str(PVALUE_HEADER);
            s.push('\n');
            for p in &self.pvalues {
                let _ = writeln!(s, "{},{},{},{}", p.t, p.model_a, p.model_b, p.p);
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut report = EvalReport::default();
        let mut section = 0;
        for (i, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::Format(format!("report line {}: {what}", i + 1));
            if let Some(kv) = line.strip_prefix("# ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad("config line without '='"))?;
                report.config.push((k.to_string(), v.to_string()));
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if line == REPORT_HEADER {
                section = 1;
                continue;
            }
            if line == PVALUE_HEADER {
                section = 2;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
            match (section, f.len()) {
                (1, 7) => report.rows.push(ReportRow {
                    model: f[0].to_string(),
                    t: int(f[1])?,
                    n: int(f[2])?,
                    a_m: num(f[3])?,
                    stderr: num(f[4])?,
                    a_c: num(f[5])?,
                    p_r: num(f[6])?,
                }),
                (2, 4) => report.pvalues.push(PairwiseP {
                    t: int(f[0])?,
                    model_a: f[1].to_string(),
                    model_b: f[2].to_string(),
                    p: num(f[3])?,
                }),
                _ => return Err(bad("unexpected row")),
            }
        }
        Ok(report)
    }
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => report.to_json()?,
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    fn trace(score: usize) -> GuessTrace {
        GuessTrace {
            guesses: vec![],
            success_index: Some(score),
            budget: 10,
        }
    }

    #[test]
    fn guess_summaries() {
        let s = evaluate_guesses(&[trace(1), trace(2), trace(3)]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.n, 3);
        assert_eq!(evaluate_guesses(&[trace(4), trace(4)]).unwrap().stderr, 0.0);
        assert!(evaluate_guesses(&[]).is_err());
        let miss = GuessTrace {
            guesses: vec![],
            success_index: None,
            budget: 20,
        };
        assert_eq!(evaluate_guesses(&[miss]).unwrap().mean, 21.0);
    }

    #[test]
    fn grouped_summary_averages_within_groups() {
        let s = summarize_grouped(&[("a".into(), 1.0), ("a".into(), 3.0), ("b".into(), 4.0)]).unwrap();
        assert_eq!(s.n, 2);
        assert_eq!(s.mean, 3.0);
    }

    #[test]
    fn relative_performance_values() {
        assert_eq!(relative_performance(3.0, 3.0).unwrap(), 0.0);
        assert!((relative_performance(2.8, 3.0).unwrap() - 0.0667).abs() < 5e-5);
        assert!(relative_performance(3.5, 3.0).unwrap() < 0.0);
        assert!(relative_performance(1.0, 0.0).is_err());
    }

    #[test]
    fn t_distribution_matches_reference() {
        for &df in &[1.0, 2.5, 5.0, 10.0, 30.0, 200.0] {
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            for &t in &[0.1, 0.7, 1.0, 1.96, 3.0, 6.0] {
                let want = 2.0 * (1.0 - dist.cdf(t));
                let got = student_t_two_tailed(t, df);
                assert!((got - want).abs() < 1e-9, "df={df} t={t}: {got} vs {want}");
            }
        }
        assert!((student_t_two_tailed(1.96, 1e7) - 0.05).abs() < 1e-3);
        assert!((student_t_two_tailed(1.96, f64::INFINITY) - 0.049_995_790_296).abs() < 1e-9);
        assert!((erfc(0.5) - 0.479_500_122_186_953_5).abs() < 1e-12);
    }

    #[test]
    fn welch_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let r = welch_ttest(&a, &a).unwrap();
        assert_eq!(r.p, 1.0);
        let b = [2.0, 4.0, 5.0, 7.0, 9.0];
        let ab = welch_ttest(&a, &b).unwrap();
        let ba = welch_ttest(&b, &a).unwrap();
        assert_eq!(ab.p, ba.p);
        assert!(welch_ttest(&[1.0], &b).is_err());
        assert!(welch_ttest(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    }

    #[test]
    fn chance_monte_carlo_on_arrays() {
        use crate::dataset::Candidate;
        use crate::engine::SearchSpace;
        use crate::image::Rect;
        let cands: Vec<Candidate> = (0..5)
            .map(|i| Candidate {
                id: format!("c{i}"),
                rect: Rect::new(10 * i, 0, 8, 8),
            })
            .collect();
        let task = GuessTask {
            width: 50,
            height: 8,
            target: cands[2].rect,
            target_id: Some("c2".into()),
            space: SearchSpace::Candidates(cands),
            rule: Default::default(),
        };
        let s = monte_carlo_chance(&[task.clone()], 10_000, 1).unwrap();
        assert!((s.mean - 3.0).abs() < 0.05, "{}", s.mean);
        assert!(monte_carlo_chance(&[task], 50, 1).is_err());
    }

    #[test]
    fn topn_cases() {
        let rankings = vec![vec![3, 1, 2, 0], vec![0, 1, 2, 3]];
        let acc = topn_accuracy(&rankings, &[1, 3], &[1, 2, 4], 4).unwrap();
        assert_eq!(acc, vec![0.0, 0.5, 1.0]);
        assert!(topn_accuracy(&rankings, &[1, 4], &[1], 4).is_err());
        let table = topn_table(&[(1, rankings)], &[1, 3], &[1, 4], 4).unwrap();
        assert_eq!(table.to_csv(&[]), "T,top1,top4\n1,0,1\n");
    }

    fn sample_report() -> EvalReport {
        let row = ReportRow::new(
            "infernet",
            1,
            Summary {
                mean: 2.23,
                stderr: 0.081_234_5,
                n: 200,
            },
            3.0,
        )
        .unwrap();
        EvalReport {
            config: vec![("seed".into(), "7".into()), ("taps".into(), "5,10".into())],
            rows: vec![row],
            pvalues: vec![PairwiseP {
                t: 1,
                model_a: "infernet".into(),
                model_b: "chance".into(),
                p: 1.234e-9,
            }],
        }
    }

    #[test]
    fn report_round_trips() {
        let r = sample_report();
        let csv = r.to_csv();
        assert!(csv.starts_with("# seed=7\n# taps=5,10\nmodel,T,n,A_m,stderr,A_c,P_r\n"));
        assert_eq!(EvalReport::from_csv(&csv).unwrap(), r);
        assert_eq!(r.to_csv(), csv);
        let json = r.to_json().unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
        assert_eq!(EvalReport::default().to_csv(), format!("{REPORT_HEADER}\n"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        emit_report(&r, ReportFormat::Csv, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), csv);
        for row in &r.rows {
            assert_eq!(row.p_r, (row.a_c - row.a_m) / row.a_c);
        }
    }

    proptest! {
        #[test]
        fn topn_monotone(seed in 0u64..200) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rankings: Vec<Vec<usize>> = (0..30).map(|_| { let mut v: Vec<usize> = (0..50).collect(); v.shuffle(&mut rng); v }).collect();
            let truths: Vec<usize> = (0..30).map(|i| (i * 7) % 50).collect();
            let ns: Vec<usize> = (1..=50).collect();
            let acc = topn_accuracy(&rankings, &truths, &ns, 50).unwrap();
            prop_assert!(acc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*acc.last().unwrap(), 1.0);
        }

        #[test]
        fn welch_p_shrinks_with_gap(gap in 0.0f64..3.0, extra in 0.0f64..2.0) {
            let base = [0.1, -0.4, 0.3, 0.9, -0.7, 0.2];
            let shift = |g: f64| base.iter().map(|v| v + g).collect::<Vec<_>>();
            let p1 = welch_ttest(&base, &shift(gap)).unwrap().p;
            let p2 = welch_ttest(&base, &shift(gap + extra)).unwrap().p;
            prop_assert!(p2 <= p1 + 1e-12);
        }
    }
}

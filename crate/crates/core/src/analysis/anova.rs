//! Two-way repeated-measures ANOVA and pooled-variance planned comparisons.

use serde::{Deserialize, Serialize};

use super::special::{f_sf, t_two_sided};
use super::{AnalysisError, DeltaPsTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SphericityCorrection {
    #[default]
    None,
    GreenhouseGeisser,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AnovaOptions {
    pub sphericity: SphericityCorrection,
}

/// One within-subject effect tested against its own subject interaction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectTest {
    pub ss: f64,
    pub df_num: f64,
    pub ms: f64,
    pub ss_error: f64,
    pub df_den: f64,
    pub ms_error: f64,
    pub f: f64,
    pub p: f64,
    /// Greenhouse–Geisser epsilon, when the correction was applied.
    pub epsilon: Option<f64>,
    /// The error term vanished; `f` and `p` are limits, not estimates.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    /// First factor (target force).
    pub target: EffectTest,
    /// Second factor (displacement).
    pub displacement: EffectTest,
    pub interaction: EffectTest,
    pub ss_subject: f64,
    pub ss_total: f64,
    pub n_subjects: usize,
    pub degenerate: bool,
}

impl AnovaResult {
    pub fn effects(&self) -> [(&'static str, &EffectTest); 3] {
        [
            ("target", &self.target),
            ("displacement", &self.displacement),
            ("interaction", &self.interaction),
        ]
    }
}

/// All the sums of squares of the fully within-subject two-way design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SumsOfSquares {
    pub subject: f64,
    pub a: f64,
    pub b: f64,
    pub ab: f64,
    pub a_s: f64,
    pub b_s: f64,
    pub ab_s: f64,
    pub total: f64,
}

pub fn sums_of_squares(table: &DeltaPsTable) -> SumsOfSquares {
    let (n, a, b) = table.shape();
    let y = |s: usize, i: usize, j: usize| table.values[s][i][j];
    let (nf, af, bf) = (n as f64, a as f64, b as f64);

    let grand = table.values.iter().flatten().flatten().sum::<f64>() / (nf * af * bf);
    let subj: Vec<f64> = (0..n)
        .map(|s| table.values[s].iter().flatten().sum::<f64>() / (af * bf))
        .collect();
    let a_mean: Vec<f64> = (0..a)
        .map(|i| (0..n).flat_map(|s| (0..b).map(move |j| (s, j))).map(|(s, j)| y(s, i, j)).sum::<f64>() / (nf * bf))
        .collect();
    let b_mean: Vec<f64> = (0..b)
        .map(|j| (0..n).flat_map(|s| (0..a).map(move |i| (s, i))).map(|(s, i)| y(s, i, j)).sum::<f64>() / (nf * af))
        .collect();
    let ab_mean = |i: usize, j: usize| (0..n).map(|s| y(s, i, j)).sum::<f64>() / nf;
    let as_mean = |s: usize, i: usize| (0..b).map(|j| y(s, i, j)).sum::<f64>() / bf;
    let bs_mean = |s: usize, j: usize| (0..a).map(|i| y(s, i, j)).sum::<f64>() / af;

    let mut ss = SumsOfSquares {
        subject: 0.0,
        a: 0.0,
        b: 0.0,
        ab: 0.0,
        a_s: 0.0,
        b_s: 0.0,
        ab_s: 0.0,
        total: 0.0,
    };
    for s in 0..n {
        ss.subject += af * bf * (subj[s] - grand).powi(2);
        for i in 0..a {
            ss.a_s += bf * (as_mean(s, i) - a_mean[i] - subj[s] + grand).powi(2);
        }
        for j in 0..b {
            ss.b_s += af * (bs_mean(s, j) - b_mean[j] - subj[s] + grand).powi(2);
        }
        for i in 0..a {
            for j in 0..b {
                let v = y(s, i, j);
                ss.total += (v - grand).powi(2);
                ss.ab_s += (v - ab_mean(i, j) - as_mean(s, i) - bs_mean(s, j)
                    + a_mean[i]
                    + b_mean[j]
                    + subj[s]
                    - grand)
                    .powi(2);
            }
        }
    }
    for i in 0..a {
        ss.a += nf * bf * (a_mean[i] - grand).powi(2);
        for j in 0..b {
            ss.ab += nf * (ab_mean(i, j) - a_mean[i] - b_mean[j] + grand).powi(2);
        }
    }
    for j in 0..b {
        ss.b += nf * af * (b_mean[j] - grand).powi(2);
    }
    ss
}

/// Below this fraction of the raw sum of squares a term counts as zero;
/// rounding in the cell means leaves residue around 1e-30 of it.
const DEGENERATE_REL: f64 = 1e-20;

fn effect(ss: f64, df_num: f64, ss_error: f64, df_den: f64, scale: f64) -> EffectTest {
    let ms = ss / df_num;
    let ms_error = ss_error / df_den;
    let floor = DEGENERATE_REL * scale.max(f64::MIN_POSITIVE);
    let degenerate = ss_error <= floor;
    let (f, p) = if degenerate {
        if ss <= floor {
            (0.0, 1.0)
        } else {
            (f64::INFINITY, 0.0)
        }
    } else {
        let f = ms / ms_error;
        (f, f_sf(f, df_num, df_den))
    };
    EffectTest {
        ss,
        df_num,
        ms,
        ss_error,
        df_den,
        ms_error,
        f,
        p,
        epsilon: None,
        degenerate,
    }
}

pub fn rm_anova_2way(table: &DeltaPsTable) -> Result<AnovaResult, AnalysisError> {
    rm_anova_2way_with(table, AnovaOptions::default())
}

pub fn rm_anova_2way_with(
    table: &DeltaPsTable,
    options: AnovaOptions,
) -> Result<AnovaResult, AnalysisError> {
    table.validate()?;
    let (n, a, b) = table.shape();
    if n < 2 {
        return Err(AnalysisError::TooFewSubjects(n));
    }
    if a < 2 || b < 2 {
        return Err(AnalysisError::TooFewLevels);
    }
    let ss = sums_of_squares(table);
    let (nf, af, bf) = (n as f64, a as f64, b as f64);
    let scale: f64 = table.values.iter().flatten().flatten().map(|v| v * v).sum();
    let mut target = effect(ss.a, af - 1.0, ss.a_s, (af - 1.0) * (nf - 1.0), scale);
    let mut displacement = effect(ss.b, bf - 1.0, ss.b_s, (bf - 1.0) * (nf - 1.0), scale);
    let mut interaction = effect(
        ss.ab,
        (af - 1.0) * (bf - 1.0),
        ss.ab_s,
        (af - 1.0) * (bf - 1.0) * (nf - 1.0),
        scale,
    );

    if options.sphericity == SphericityCorrection::GreenhouseGeisser {
        for (test, kind) in [
            (&mut target, Term::A),
            (&mut displacement, Term::B),
            (&mut interaction, Term::AB),
        ] {
            let eps = gg_epsilon(table, kind);
            test.epsilon = Some(eps);
            if !test.degenerate {
                test.p = f_sf(test.f, test.df_num * eps, test.df_den * eps);
            }
        }
    }

    Ok(AnovaResult {
        degenerate: target.degenerate || displacement.degenerate || interaction.degenerate,
        target,
        displacement,
        interaction,
        ss_subject: ss.subject,
        ss_total: ss.total,
        n_subjects: n,
    })
}

#[derive(Debug, Clone, Copy)]
enum Term {
    A,
    B,
    AB,
}

/// Greenhouse–Geisser epsilon of one term: `(tr S*)² / (df · tr(S*²))` where
/// `S*` is the subject covariance of the cells projected onto the term.
fn gg_epsilon(table: &DeltaPsTable, term: Term) -> f64 {
    let (n, a, b) = table.shape();
    let k = a * b;
    // Projection per factor: centering (H) for the factors in the term,
    // averaging (J/m) for the others.
    let proj = |m: usize, center: bool| -> Vec<Vec<f64>> {
        (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| {
                        let avg = 1.0 / m as f64;
                        if center {
                            f64::from(u8::from(i == j)) - avg
                        } else {
                            avg
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let (pa, pb, df) = match term {
        Term::A => (proj(a, true), proj(b, false), a - 1),
        Term::B => (proj(a, false), proj(b, true), b - 1),
        Term::AB => (proj(a, true), proj(b, true), (a - 1) * (b - 1)),
    };
    if df <= 1 {
        return 1.0;
    }
    let p = |r: usize, c: usize| pa[r / b][c / b] * pb[r % b][c % b];

    let cell = |s: usize, c: usize| table.values[s][c / b][c % b];
    let means: Vec<f64> = (0..k)
        .map(|c| (0..n).map(|s| cell(s, c)).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![vec![0.0; k]; k];
    for (r, row) in cov.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..n)
                .map(|s| (cell(s, r) - means[r]) * (cell(s, c) - means[c]))
                .sum::<f64>()
                / (n as f64 - 1.0);
        }
    }
    let mul = |x: &dyn Fn(usize, usize) -> f64, y: &dyn Fn(usize, usize) -> f64| {
        (0..k)
            .map(|r| {
                (0..k)
                    .map(|c| (0..k).map(|m| x(r, m) * y(m, c)).sum::<f64>())
                    .collect::<Vec<f64>>()
            })
            .collect::<Vec<_>>()
    };
    let ps = mul(&p, &|r, c| cov[r][c]);
    let psp = mul(&|r, c| ps[r][c], &p);
    let trace: f64 = (0..k).map(|i| psp[i][i]).sum();
    let trace_sq: f64 = psp.iter().flatten().map(|v| v * v).sum();
    if trace_sq == 0.0 {
        return 1.0;
    }
    let eps = trace * trace / (df as f64 * trace_sq);
    eps.clamp(1.0 / df as f64, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label: String,
    /// Level of the first factor the comparison is made within.
    pub within: usize,
    /// Second-factor levels compared, `(higher, lower)`.
    pub levels: (usize, usize),
    /// Mean difference, higher minus lower level.
    pub delta: f64,
    pub se: f64,
    pub t: f64,
    pub df: f64,
    pub p_raw: f64,
    pub p_holm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub pairs: Vec<Comparison>,
    pub ms_pool: f64,
    pub df_pool: f64,
}

/// Holm step-down adjustment; output is in input order.
pub fn holm_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p[i].total_cmp(&p[j]));
    let mut adjusted = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        let v = ((m - rank) as f64 * p[i]).min(1.0);
        running = running.max(v);
        adjusted[i] = running;
    }
    adjusted
}

/// Adjacent-level comparisons of the second factor within each level of the
/// first, tested against the pooled `B×S` and `AB×S` error with a
/// Satterthwaite degrees of freedom, Holm-adjusted jointly.
pub fn holm_planned_comparisons(
    table: &DeltaPsTable,
    anova: &AnovaResult,
) -> Result<ComparisonResult, AnalysisError> {
    table.validate()?;
    let (n, a, b) = table.shape();
    if b < 2 {
        return Err(AnalysisError::TooFewLevels);
    }
    let (ss1, df1) = (anova.displacement.ss_error, anova.displacement.df_den);
    let (ss2, df2) = (anova.interaction.ss_error, anova.interaction.df_den);
    let ms_pool = (ss1 + ss2) / (df1 + df2);
    let denom = ss1 * ss1 / df1 + ss2 * ss2 / df2;
    let df_pool = if denom > 0.0 {
        (ss1 + ss2).powi(2) / denom
    } else {
        df1 + df2
    };
    let se = (2.0 * ms_pool / n as f64).sqrt();

    let cell_mean = |i: usize, j: usize| table.values.iter().map(|s| s[i][j]).sum::<f64>() / n as f64;
    let mut pairs = Vec::new();
    for i in 0..a {
        for j in 1..b {
            let delta = cell_mean(i, j) - cell_mean(i, j - 1);
            let t = if se > 0.0 {
                delta / se
            } else if delta == 0.0 {
                0.0
            } else {
                delta.signum() * f64::INFINITY
            };
            pairs.push(Comparison {
                label: format!(
                    "{}: {} vs {}",
                    table.a_labels[i],
                    table.b_labels[j],
                    table.b_labels[j - 1]
                ),
                within: i,
                levels: (j, j - 1),
                delta,
                se,
                t,
                df: df_pool,
                p_raw: t_two_sided(t, df_pool),
                p_holm: 0.0,
            });
        }
    }
    let raw: Vec<f64> = pairs.iter().map(|c| c.p_raw).collect();
    for (c, p) in pairs.iter_mut().zip(holm_adjust(&raw)) {
        c.p_holm = p;
    }
    Ok(ComparisonResult {
        pairs,
        ms_pool,
        df_pool,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(values: Vec<[[f64; 3]; 2]>) -> DeltaPsTable {
        DeltaPsTable::from_arrays(values).unwrap()
    }

    #[test]
    fn constant_table_is_degenerate_with_zero_f() {
        let t = table(vec![[[0.1; 3]; 2]; 4]);
        let r = rm_anova_2way(&t).unwrap();
        assert!(r.degenerate);
        for (_, e) in r.effects() {
            assert_eq!(e.f, 0.0);
            assert_eq!(e.p, 1.0);
        }
    }

    #[test]
    fn df_for_ten_subjects() {
        let values = (0..10)
            .map(|s| {
                let s = s as f64;
                [
                    [0.1 + 0.01 * s, 0.15 + 0.02 * s.sin(), 0.2 + 0.01 * s.cos()],
                    [0.05 + 0.003 * s * s, 0.1, 0.12 - 0.01 * s.sin()],
                ]
            })
            .collect();
        let r = rm_anova_2way(&table(values)).unwrap();
        assert_eq!((r.target.df_num, r.target.df_den), (1.0, 9.0));
        assert_eq!((r.displacement.df_num, r.displacement.df_den), (2.0, 18.0));
        assert_eq!((r.interaction.df_num, r.interaction.df_den), (2.0, 18.0));
    }

    #[test]
    fn holm_adjustment() {
        let adj = holm_adjust(&[0.01, 0.04, 0.03, 0.005]);
        // sorted: 0.005*4, 0.01*3, 0.03*2, 0.04*1 -> 0.02, 0.03, 0.06, 0.06
        let expect = [0.03, 0.06, 0.06, 0.02];
        for (a, e) in adj.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
        assert_eq!(holm_adjust(&[0.9, 0.8]), vec![1.0, 1.0]);
    }

    #[test]
    fn equal_cell_means_give_unit_p() {
        // Subjects differ but every condition mean is the same.
        let values = vec![
            [[0.1, 0.2, 0.3], [0.3, 0.2, 0.1]],
            [[0.3, 0.2, 0.1], [0.1, 0.2, 0.3]],
            [[0.2, 0.2, 0.2], [0.2, 0.2, 0.2]],
        ];
        let t = table(values);
        let r = rm_anova_2way(&t).unwrap();
        let c = holm_planned_comparisons(&t, &r).unwrap();
        assert_eq!(c.pairs.len(), 4);
        for p in &c.pairs {
            assert!(p.delta.abs() < 1e-15);
            assert!((p.p_raw - 1.0).abs() < 1e-9);
            assert_eq!(p.p_holm, 1.0);
        }
    }

    #[test]
    fn satterthwaite_df_bounds() {
        let values = (0..10)
            .map(|s| {
                let s = s as f64;
                [
                    [0.1 + 0.02 * (s * 1.3).sin(), 0.15 + 0.03 * s.cos(), 0.2],
                    [0.05, 0.1 + 0.02 * (s * 0.7).sin(), 0.12 - 0.01 * s.sin()],
                ]
            })
            .collect();
        let t = table(values);
        let r = rm_anova_2way(&t).unwrap();
        let c = holm_planned_comparisons(&t, &r).unwrap();
        assert!(c.df_pool > 18.0 && c.df_pool <= 36.0, "{}", c.df_pool);
    }

    #[test]
    fn gg_epsilon_in_range() {
        let values = (0..8)
            .map(|s| {
                let s = s as f64;
                [
                    [0.1 * s, 0.15 + 0.03 * s.cos(), 0.2 - 0.02 * s],
                    [0.05, 0.1 + 0.02 * (s * 0.7).sin(), 0.12 + 0.04 * s],
                ]
            })
            .collect();
        let t = table(values);
        let plain = rm_anova_2way(&t).unwrap();
        let gg = rm_anova_2way_with(
            &t,
            AnovaOptions {
                sphericity: SphericityCorrection::GreenhouseGeisser,
            },
        )
        .unwrap();
        assert_eq!(gg.target.epsilon, Some(1.0));
        for e in [gg.displacement.epsilon.unwrap(), gg.interaction.epsilon.unwrap()] {
            assert!((0.5..=1.0).contains(&e), "{e}");
        }
        assert_eq!(gg.displacement.f, plain.displacement.f);
        assert!(gg.displacement.p >= plain.displacement.p - 1e-15);
    }
}

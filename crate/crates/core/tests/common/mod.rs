#![allow(dead_code)]

//! Frozen output of `tests/oracle/anova_oracle.py` for the dataset below.

pub const ORACLE_DATA: [[[f64; 3]; 2]; 4] = [
    [[0.10, 0.14, 0.25], [0.05, 0.09, 0.08]],
    [[0.07, 0.16, 0.21], [0.04, 0.11, 0.12]],
    [[0.12, 0.13, 0.27], [0.06, 0.08, 0.10]],
    [[0.08, 0.18, 0.22], [0.02, 0.10, 0.09]],
];

pub const SS_TOTAL: f64 = 0.09849583333333332;
pub const SS_SUBJECT: f64 = 0.00044583333333333974;
pub const SS_A: f64 = 0.040837499999999985;
pub const SS_B: f64 = 0.04020833333333333;
pub const SS_AB: f64 = 0.009975;
pub const SS_AS: f64 = 0.001345833333333336;
pub const SS_BS: f64 = 0.004191666666666666;
pub const SS_ABS: f64 = 0.0014916666666666663;

/// (F, p) for target, displacement, interaction.
pub const EFFECTS: [(f64, f64); 3] = [
    (91.03095975232176, 0.002442155431149837),
    (28.777335984095437, 0.0008414170473122894),
    (20.061452513966483, 0.0022014244784215138),
];

pub const MS_POOL: f64 = 0.000473611111111111;
pub const DF_POOL: f64 = 9.790366602350463;
pub const SE: f64 = 0.015388487760516155;

/// (delta, t, p_raw, p_holm) in the order 5 N 1v0.5, 5 N 1.5v1, 7.5 N 1v0.5,
/// 7.5 N 1.5v1.
pub const COMPARISONS: [(f64, f64, f64, f64); 4] = [
    (0.06000000000000001, 3.899018599731954, 0.0030870713801891686, 0.009261214140567506),
    (0.08499999999999996, 5.523609682953598, 0.00027323524634595767, 0.0010929409853838307),
    (0.052500000000000005, 3.4116412747654596, 0.0068437296595971935, 0.013687459319194387),
    (0.0025000000000000022, 0.16245910832216487, 0.8742483800116914, 0.8742483800116914),
];

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

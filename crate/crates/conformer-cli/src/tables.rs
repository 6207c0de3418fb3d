//! Published full-scale reference numbers, printed alongside desk-scale
//! measurements so the two are never conflated.

#[derive(Debug, Clone, Copy)]
pub struct ReferenceRow {
    pub arm: &'static str,
    /// Top-1 accuracy percent; absent where the source table omits it.
    pub accuracy_pct: Option<f64>,
    pub nll: f64,
}

pub fn reference_rows(grid: &str) -> &'static [ReferenceRow] {
    match grid {
        "heads" => &[
            ReferenceRow { arm: "4", accuracy_pct: Some(64.0), nll: 1.16 },
            ReferenceRow { arm: "8", accuracy_pct: Some(65.5), nll: 1.14 },
            ReferenceRow { arm: "16", accuracy_pct: Some(65.1), nll: 1.12 },
            ReferenceRow { arm: "32", accuracy_pct: Some(65.8), nll: 1.10 },
        ],
        "embed" => &[
            ReferenceRow { arm: "16", accuracy_pct: Some(53.6), nll: 1.16 },
            ReferenceRow { arm: "64", accuracy_pct: Some(65.5), nll: 1.14 },
            ReferenceRow { arm: "256", accuracy_pct: Some(70.2), nll: 0.96 },
        ],
        "conv" => &[
            ReferenceRow { arm: "none", accuracy_pct: None, nll: 1.03 },
            ReferenceRow { arm: "small", accuracy_pct: Some(70.15), nll: 0.965 },
            ReferenceRow { arm: "large", accuracy_pct: Some(70.25), nll: 0.958 },
        ],
        _ => &[],
    }
}

pub fn reference_for(grid: &str, arm: &str) -> Option<ReferenceRow> {
    reference_rows(grid).iter().copied().find(|r| r.arm == arm)
}

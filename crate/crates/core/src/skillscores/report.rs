use std::fmt::Write as _;

use super::{FoldAggregate, HitCounts, SkillReport, Stratified, SubclassRate};

fn recall_cell(h: &HitCounts) -> String {
    h.recall().map(|r| format!("{r:.2}")).unwrap_or_else(|_| "-".to_owned())
}

fn recall_csv(h: &HitCounts) -> String {
    h.recall().map(|r| r.to_string()).unwrap_or_default()
}

/// `tp,tn,fp,fn,tss,hss,recall` with one data row.
pub fn skill_csv(r: &SkillReport) -> String {
    let c = &r.confusion;
    format!("tp,tn,fp,fn,tss,hss,recall\n{},{},{},{},{},{},{}\n", c.tp, c.tn, c.fp, c.fn_, r.tss, r.hss, r.recall)
}

/// Per-subclass false-positive rates as `subclass,fp,tn,rate`.
pub fn sfpr_csv(rates: &[SubclassRate]) -> String {
    let mut out = String::from("subclass,fp,tn,rate\n");
    for s in rates {
        let _ = writeln!(out, "{},{},{},{}", s.bin, s.fp, s.tn, s.rate());
    }
    out
}

/// Region x letter hit counts as CSV; empty recalls are left blank.
pub fn stratified_csv(model: &str, s: &Stratified) -> String {
    let mut out = String::from("model,region,class,tp,fn,recall\n");
    for (region, counts) in [("central", &s.central), ("near_limb", &s.near_limb)] {
        for (class, h) in [("X", counts.x), ("M", counts.m), ("X&M", counts.total())] {
            let _ = writeln!(out, "{model},{region},{class},{},{},{}", h.tp, h.fn_, recall_csv(&h));
        }
    }
    out
}

/// Aligned text table of hits and misses by longitude region.
pub fn stratified_table(model: &str, s: &Stratified, boundary_deg: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:<12} | {:>20} | {:>20}",
        "",
        "",
        format!("within ±{boundary_deg}°"),
        format!("beyond ±{boundary_deg}°")
    );
    let _ = writeln!(
        out,
        "{:<6} {:<12} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6}",
        "Model", "Flare-Class", "TP", "FN", "Recall", "TP", "FN", "Recall"
    );
    let rows = [
        ("X-Class", s.central.x, s.near_limb.x),
        ("M-Class", s.central.m, s.near_limb.m),
        ("Total", s.central.total(), s.near_limb.total()),
    ];
    for (i, (name, c, n)) in rows.iter().enumerate() {
        let label = if i == 0 { model } else { "" };
        let _ = writeln!(
            out,
            "{label:<6} {name:<12} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6}",
            c.tp,
            c.fn_,
            recall_cell(c),
            n.tp,
            n.fn_,
            recall_cell(n)
        );
    }
    out
}

/// One `Models  TSS  HSS` row, e.g. `M2  0.54±0.03  0.37±0.07`.
pub fn summary_row(model: &str, agg: &FoldAggregate) -> String {
    format!("{model:<6} {:>12} {:>12}", agg.tss.to_string(), agg.hss.to_string())
}

pub fn aggregate_csv(model: &str, agg: &FoldAggregate) -> String {
    format!(
        "model,folds,tss_mean,tss_sd,hss_mean,hss_sd,recall_mean,recall_sd\n{model},{},{},{},{},{},{},{}\n",
        agg.folds, agg.tss.mean, agg.tss.sd, agg.hss.mean, agg.hss.sd, agg.recall.mean, agg.recall.sd
    )
}

//! Forecast verification: confusion counts, TSS/HSS, longitude-stratified
//! recall, NF-subclass false-positive rates and fold aggregation.

mod report;

use std::fmt;

use crate::error::{Error, Result};
use crate::heliodata::{ClassLetter, FlareClass, Label};

pub use self::report::{aggregate_csv, sfpr_csv, skill_csv, stratified_csv, stratified_table, summary_row};

/// Default central/near-limb boundary in degrees of heliographic longitude.
pub const LIMB_BOUNDARY_DEG: f64 = 70.0;

/// Binary confusion counts with FL as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionMatrix { tp, tn, fp, fn_ }
    }

    /// Actual positives, `TP + FN`.
    pub fn p(&self) -> u64 {
        self.tp + self.fn_
    }

    /// Actual negatives, `TN + FP`.
    pub fn n(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn total(&self) -> u64 {
        self.p() + self.n()
    }

    pub fn record(&mut self, predicted: Label, actual: Label) {
        match (predicted, actual) {
            (Label::FL, Label::FL) => self.tp += 1,
            (Label::NF, Label::NF) => self.tn += 1,
            (Label::FL, Label::NF) => self.fp += 1,
            (Label::NF, Label::FL) => self.fn_ += 1,
        }
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(self, o: ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix::new(self.tp + o.tp, self.tn + o.tn, self.fp + o.fp, self.fn_ + o.fn_)
    }
}

pub fn confusion(predictions: &[Label], labels: &[Label]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("no samples to score".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &a) in predictions.iter().zip(labels) {
        cm.record(p, a);
    }
    Ok(cm)
}

/// True skill statistic: hit rate minus false-alarm rate.
pub fn tss(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.p() == 0 || cm.n() == 0 {
        return Err(Error::UndefinedScore(format!("TSS needs both classes (P = {}, N = {})", cm.p(), cm.n())));
    }
    Ok(cm.tp as f64 / cm.p() as f64 - cm.fp as f64 / cm.n() as f64)
}

/// Heidke skill score.
pub fn hss(cm: &ConfusionMatrix) -> Result<f64> {
    let (tp, tn, fp, fn_) = (cm.tp as f64, cm.tn as f64, cm.fp as f64, cm.fn_ as f64);
    let denom = cm.p() as f64 * (fn_ + tn) + (tp + fp) * cm.n() as f64;
    if denom == 0.0 {
        return Err(Error::UndefinedScore("HSS denominator is zero".into()));
    }
    Ok(2.0 * (tp * tn - fn_ * fp) / denom)
}

pub fn recall(tp: u64, fn_: u64) -> Result<f64> {
    if tp + fn_ == 0 {
        return Err(Error::UndefinedScore("recall of an empty class".into()));
    }
    Ok(tp as f64 / (tp + fn_) as f64)
}

/// One evaluated sample with the metadata needed for stratified scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredSample {
    pub label: Label,
    pub predicted: Label,
    pub window_max_class: FlareClass,
    /// Longitude of the window's strongest event.
    pub hg_lon_deg: Option<f64>,
}

/// Hit/miss counts of one flare letter within one longitude region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HitCounts {
    pub tp: u64,
    pub fn_: u64,
}

impl HitCounts {
    pub fn recall(&self) -> Result<f64> {
        recall(self.tp, self.fn_)
    }
}

impl std::ops::Add for HitCounts {
    type Output = HitCounts;

    fn add(self, o: HitCounts) -> HitCounts {
        HitCounts { tp: self.tp + o.tp, fn_: self.fn_ + o.fn_ }
    }
}

/// Hits and misses of X- and M-class samples in one region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RegionCounts {
    pub x: HitCounts,
    pub m: HitCounts,
}

impl RegionCounts {
    pub fn total(&self) -> HitCounts {
        self.x + self.m
    }
}

impl std::ops::Add for RegionCounts {
    type Output = RegionCounts;

    fn add(self, o: RegionCounts) -> RegionCounts {
        RegionCounts { x: self.x + o.x, m: self.m + o.m }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stratified {
    /// `|longitude| <= boundary`.
    pub central: RegionCounts,
    pub near_limb: RegionCounts,
}

impl std::ops::Add for Stratified {
    type Output = Stratified;

    fn add(self, o: Stratified) -> Stratified {
        Stratified { central: self.central + o.central, near_limb: self.near_limb + o.near_limb }
    }
}

/// Splits FL samples into central and near-limb buckets by the longitude of
/// their driving event, then by letter. The boundary itself is central.
pub fn stratify(samples: &[ScoredSample], boundary_deg: f64) -> Result<Stratified> {
    let mut out = Stratified::default();
    for (i, s) in samples.iter().enumerate().filter(|(_, s)| s.label == Label::FL) {
        let lon = s
            .hg_lon_deg
            .ok_or_else(|| Error::Metadata(format!("FL sample {i} has no driving-event longitude")))?;
        let region = if lon.abs() <= boundary_deg { &mut out.central } else { &mut out.near_limb };
        let counts = match s.window_max_class.letter() {
            ClassLetter::X => &mut region.x,
            ClassLetter::M => &mut region.m,
            other => {
                return Err(Error::Metadata(format!("FL sample {i} has window max class letter {other:?}")));
            }
        };
        if s.predicted == Label::FL {
            counts.tp += 1;
        } else {
            counts.fn_ += 1;
        }
    }
    Ok(out)
}

/// NF subclass bins, C split by integer magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SubclassBin {
    FQ,
    A,
    B,
    /// `C1` to `C9`.
    C(u8),
}

impl SubclassBin {
    /// Every bin in reporting order.
    pub fn all() -> impl Iterator<Item = SubclassBin> {
        [SubclassBin::FQ, SubclassBin::A, SubclassBin::B].into_iter().chain((1..=9).map(SubclassBin::C))
    }

    /// Bin of a non-flaring class; `None` for M and X.
    pub fn of(class: &FlareClass) -> Option<Self> {
        match class.letter() {
            ClassLetter::FQ => Some(SubclassBin::FQ),
            ClassLetter::A => Some(SubclassBin::A),
            ClassLetter::B => Some(SubclassBin::B),
            ClassLetter::C => Some(SubclassBin::C(class.magnitude().expect("lettered").floor() as u8)),
            ClassLetter::M | ClassLetter::X => None,
        }
    }
}

impl fmt::Display for SubclassBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubclassBin::FQ => f.write_str("FQ"),
            SubclassBin::A => f.write_str("A"),
            SubclassBin::B => f.write_str("B"),
            SubclassBin::C(k) => write!(f, "C{k}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubclassRate {
    pub bin: SubclassBin,
    pub fp: u64,
    pub tn: u64,
}

impl SubclassRate {
    /// `FP / (FP + TN)`; bins are only reported when non-empty.
    pub fn rate(&self) -> f64 {
        self.fp as f64 / (self.fp + self.tn) as f64
    }
}

/// False-positive rate per NF subclass. Empty bins are omitted.
pub fn subclass_fpr(samples: &[ScoredSample]) -> Vec<SubclassRate> {
    let bins: Vec<SubclassBin> = SubclassBin::all().collect();
    let mut counts = vec![(0u64, 0u64); bins.len()];
    for s in samples.iter().filter(|s| s.label == Label::NF) {
        let Some(bin) = SubclassBin::of(&s.window_max_class) else { continue };
        let k = bins.iter().position(|b| *b == bin).expect("bin listed");
        if s.predicted == Label::FL {
            counts[k].0 += 1;
        } else {
            counts[k].1 += 1;
        }
    }
    bins.into_iter()
        .zip(counts)
        .filter(|(_, (fp, tn))| fp + tn > 0)
        .map(|(bin, (fp, tn))| SubclassRate { bin, fp, tn })
        .collect()
}

/// Scores of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct SkillReport {
    pub confusion: ConfusionMatrix,
    pub tss: f64,
    pub hss: f64,
    pub recall: f64,
    pub stratified: Stratified,
    pub sfpr: Vec<SubclassRate>,
}

impl SkillReport {
    pub fn evaluate(samples: &[ScoredSample], boundary_deg: f64) -> Result<Self> {
        let predicted: Vec<Label> = samples.iter().map(|s| s.predicted).collect();
        let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
        let cm = confusion(&predicted, &labels)?;
        Ok(SkillReport {
            confusion: cm,
            tss: tss(&cm)?,
            hss: hss(&cm)?,
            recall: recall(cm.tp, cm.fn_)?,
            stratified: stratify(samples, boundary_deg)?,
            sfpr: subclass_fpr(samples),
        })
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Input(format!("need at least 2 values for a spread, got {}", values.len())));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(MeanSd { mean, sd: var.sqrt() })
    }
}

impl fmt::Display for MeanSd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = f.precision().unwrap_or(2);
        write!(f, "{:.p$}±{:.p$}", self.mean, self.sd)
    }
}

/// Cross-fold summary: metric spreads and pooled counts.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldAggregate {
    pub folds: usize,
    pub tss: MeanSd,
    pub hss: MeanSd,
    pub recall: MeanSd,
    pub confusion: ConfusionMatrix,
    pub stratified: Stratified,
    pub sfpr: Vec<SubclassRate>,
}

pub fn aggregate_folds(reports: &[SkillReport]) -> Result<FoldAggregate> {
    let pick = |f: fn(&SkillReport) -> f64| MeanSd::of(&reports.iter().map(f).collect::<Vec<_>>());
    let mut sfpr: Vec<SubclassRate> = Vec::new();
    for r in reports {
        for s in &r.sfpr {
            match sfpr.iter_mut().find(|t| t.bin == s.bin) {
                Some(t) => {
                    t.fp += s.fp;
                    t.tn += s.tn;
                }
                None => sfpr.push(*s),
            }
        }
    }
    sfpr.sort_by_key(|s| s.bin);
    Ok(FoldAggregate {
        folds: reports.len(),
        tss: pick(|r| r.tss)?,
        hss: pick(|r| r.hss)?,
        recall: pick(|r| r.recall)?,
        confusion: reports.iter().map(|r| r.confusion).fold(ConfusionMatrix::default(), |a, b| a + b),
        stratified: reports.iter().map(|r| r.stratified).fold(Stratified::default(), |a, b| a + b),
        sfpr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class(s: &str) -> FlareClass {
        s.parse().unwrap()
    }

    #[test]
    fn confusion_examples() {
        let labels: Vec<Label> = [Label::FL; 5].into_iter().chain([Label::NF; 5]).collect();
        assert_eq!(confusion(&labels, &labels).unwrap(), ConfusionMatrix::new(5, 5, 0, 0));
        let all_fl = vec![Label::FL; 10];
        assert_eq!(confusion(&all_fl, &labels).unwrap(), ConfusionMatrix::new(5, 0, 5, 0));
        assert!(matches!(confusion(&all_fl[..3], &labels), Err(Error::Input(_))));
        assert!(confusion(&[], &[]).is_err());
    }

    #[test]
    fn tss_examples() {
        assert_eq!(tss(&ConfusionMatrix::new(5, 5, 0, 0)).unwrap(), 1.0);
        assert_eq!(tss(&ConfusionMatrix::new(5, 0, 5, 0)).unwrap(), 0.0);
        assert!((tss(&ConfusionMatrix::new(5, 8, 2, 5)).unwrap() - 0.3).abs() < 1e-15);
        assert!(matches!(tss(&ConfusionMatrix::new(0, 5, 1, 0)), Err(Error::UndefinedScore(_))));
        assert!(tss(&ConfusionMatrix::new(3, 0, 0, 1)).is_err());
    }

    #[test]
    fn hss_examples() {
        assert_eq!(hss(&ConfusionMatrix::new(5, 5, 0, 0)).unwrap(), 1.0);
        assert!((hss(&ConfusionMatrix::new(2, 3, 1, 1)).unwrap() - 10.0 / 24.0).abs() < 1e-15);
        assert_eq!(hss(&ConfusionMatrix::new(4, 6, 4, 6)).unwrap(), 0.0);
        assert!(matches!(hss(&ConfusionMatrix::default()), Err(Error::UndefinedScore(_))));
    }

    #[test]
    fn recall_examples() {
        assert!((recall(636, 32).unwrap() - 0.952).abs() < 5e-4);
        assert!((recall(5486, 1012).unwrap() - 0.8442).abs() < 1e-4);
        assert_eq!(recall(7, 0).unwrap(), 1.0);
        assert!(recall(0, 0).is_err());
    }

    fn fl(lon: Option<f64>, c: &str, hit: bool) -> ScoredSample {
        ScoredSample {
            label: Label::FL,
            predicted: if hit { Label::FL } else { Label::NF },
            window_max_class: class(c),
            hg_lon_deg: lon,
        }
    }

    fn nf(c: &str, false_alarm: bool) -> ScoredSample {
        ScoredSample {
            label: Label::NF,
            predicted: if false_alarm { Label::FL } else { Label::NF },
            window_max_class: class(c),
            hg_lon_deg: None,
        }
    }

    #[test]
    fn stratify_boundaries() {
        let s = [
            fl(Some(-75.0), "M1.0", true),
            fl(Some(70.0), "X2.0", false),
            fl(Some(-70.0), "M3.0", true),
            fl(Some(12.0), "X1.0", true),
            nf("C3.0", true),
        ];
        let st = stratify(&s, LIMB_BOUNDARY_DEG).unwrap();
        assert_eq!(st.near_limb.m, HitCounts { tp: 1, fn_: 0 });
        assert_eq!(st.central.x, HitCounts { tp: 1, fn_: 1 });
        assert_eq!(st.central.m, HitCounts { tp: 1, fn_: 0 });
        assert_eq!(st.central.total() + st.near_limb.total(), HitCounts { tp: 3, fn_: 1 });
        assert!(matches!(stratify(&[fl(None, "M1.0", true)], 70.0), Err(Error::Metadata(_))));
    }

    #[test]
    fn sfpr_bins() {
        let mut s = vec![nf("C4.5", true), nf("C4.1", true), nf("C4.9", true), nf("C4.0", false), nf("FQ", false)];
        s.push(fl(Some(0.0), "M1.0", true));
        let r = subclass_fpr(&s);
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].bin, SubclassBin::FQ);
        assert_eq!(r[1], SubclassRate { bin: SubclassBin::C(4), fp: 3, tn: 1 });
        assert_eq!(r[1].rate(), 0.75);
        let clean = subclass_fpr(&[nf("B2.0", false), nf("A1.0", false)]);
        assert!(clean.iter().all(|b| b.rate() == 0.0));
        assert_eq!(SubclassBin::of(&class("C9.9")), Some(SubclassBin::C(9)));
        assert_eq!(SubclassBin::of(&class("M1.0")), None);
        assert_eq!(SubclassBin::all().count(), 12);
    }

    #[test]
    fn mean_sd_examples() {
        let m = MeanSd::of(&[0.51, 0.53, 0.55, 0.57]).unwrap();
        assert!((m.mean - 0.54).abs() < 1e-12);
        assert!((m.sd - 0.025820).abs() < 1e-6);
        assert_eq!(format!("{m:.3}"), "0.540±0.026");
        assert_eq!(MeanSd::of(&[0.3, 0.3, 0.3]).unwrap().sd, 0.0);
        assert!(MeanSd::of(&[0.3]).is_err());
    }

    #[test]
    fn aggregation_pools_counts() {
        let a = SkillReport::evaluate(&[fl(Some(1.0), "M2.0", true), nf("C1.0", false), nf("B1.0", true)], 70.0).unwrap();
        let b = SkillReport::evaluate(&[fl(Some(80.0), "X2.0", false), fl(Some(3.0), "M1.0", true), nf("C1.2", true)], 70.0)
            .unwrap();
        let agg = aggregate_folds(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(agg.confusion.tp, a.confusion.tp + b.confusion.tp);
        assert_eq!(agg.confusion, a.confusion + b.confusion);
        assert_eq!(agg.stratified.near_limb.x, HitCounts { tp: 0, fn_: 1 });
        let c1 = agg.sfpr.iter().find(|s| s.bin == SubclassBin::C(1)).unwrap();
        assert_eq!((c1.fp, c1.tn), (1, 1));
        assert!((agg.tss.mean - (a.tss + b.tss) / 2.0).abs() < 1e-15);
    }
}

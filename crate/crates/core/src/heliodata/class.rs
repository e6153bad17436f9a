use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// GOES X-ray class letter, ordered by flux.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassLetter {
    /// Flare-quiet: no event, or flux below the A threshold.
    FQ,
    A,
    B,
    C,
    M,
    X,
}

impl ClassLetter {
    pub const LETTERED: [ClassLetter; 5] = [ClassLetter::A, ClassLetter::B, ClassLetter::C, ClassLetter::M, ClassLetter::X];

    /// Decimal exponent of the letter's lower flux bound (A = 1e-8 ... X = 1e-4).
    fn exponent(self) -> Option<i32> {
        match self {
            ClassLetter::FQ => None,
            ClassLetter::A => Some(-8),
            ClassLetter::B => Some(-7),
            ClassLetter::C => Some(-6),
            ClassLetter::M => Some(-5),
            ClassLetter::X => Some(-4),
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            ClassLetter::FQ => "FQ",
            ClassLetter::A => "A",
            ClassLetter::B => "B",
            ClassLetter::C => "C",
            ClassLetter::M => "M",
            ClassLetter::X => "X",
        }
    }
}

/// Flare class such as `C7.9` or `X10.0`.
///
/// The magnitude is held in tenths so that classes compare and hash exactly.
/// Magnitudes lie in `[1.0, 10.0)` for A through M; X is open-ended, as in
/// catalog usage (X17.2).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlareClass {
    letter: ClassLetter,
    tenths: u16,
}

impl FlareClass {
    pub const FQ: FlareClass = FlareClass { letter: ClassLetter::FQ, tenths: 0 };

    pub fn new(letter: ClassLetter, magnitude: f64) -> Result<Self> {
        if letter == ClassLetter::FQ {
            return Ok(Self::FQ);
        }
        let tenths = (magnitude * 10.0).round();
        let upper = if letter == ClassLetter::X { f64::from(u16::MAX) } else { 99.0 };
        if !(10.0..=upper).contains(&tenths) {
            return Err(Error::Domain(format!("magnitude {magnitude} outside the range of class {}", letter.symbol())));
        }
        Ok(FlareClass { letter, tenths: tenths as u16 })
    }

    pub fn letter(&self) -> ClassLetter {
        self.letter
    }

    /// Decimal magnitude, `None` for FQ.
    pub fn magnitude(&self) -> Option<f64> {
        (self.letter != ClassLetter::FQ).then(|| f64::from(self.tenths) / 10.0)
    }

    /// True for M1.0 and above.
    pub fn is_flare(&self) -> bool {
        self.letter >= ClassLetter::M
    }
}

impl fmt::Display for FlareClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.letter {
            ClassLetter::FQ => f.write_str("FQ"),
            l => write!(f, "{}{}.{}", l.symbol(), self.tenths / 10, self.tenths % 10),
        }
    }
}

impl FromStr for FlareClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("FQ") {
            return Ok(Self::FQ);
        }
        let bad = || Error::Format(format!("invalid flare class {s:?}"));
        let mut chars = s.chars();
        let letter = match chars.next().map(|c| c.to_ascii_uppercase()) {
            Some('A') => ClassLetter::A,
            Some('B') => ClassLetter::B,
            Some('C') => ClassLetter::C,
            Some('M') => ClassLetter::M,
            Some('X') => ClassLetter::X,
            _ => return Err(bad()),
        };
        let magnitude: f64 = chars.as_str().parse().map_err(|_| bad())?;
        FlareClass::new(letter, magnitude).map_err(|_| bad())
    }
}

/// Classifies a peak flux in W m^-2.
///
/// The magnitude is `flux / 10^exponent` rounded half-up to one decimal and
/// capped at 9.9 below X, so a flux just under a letter boundary never spills
/// into the next letter (9.99e-5 is M9.9).
pub fn flux_to_class(flux: f64) -> Result<FlareClass> {
    if !(flux >= 0.0) || !flux.is_finite() {
        return Err(Error::Domain(format!("flux must be finite and non-negative, got {flux}")));
    }
    let letter = ClassLetter::LETTERED
        .into_iter()
        .rev()
        .find(|l| flux >= class_to_flux_lower_bound(&FlareClass { letter: *l, tenths: 10 }));
    let Some(letter) = letter else {
        return Ok(FlareClass::FQ);
    };
    let base = 10f64.powi(letter.exponent().expect("lettered"));
    // Relative guard so decimal inputs like 7.9e-6 do not round down through
    // binary representation error.
    let mut tenths = (flux / base * 10.0 * (1.0 + 1e-9) + 0.5).floor();
    if letter != ClassLetter::X {
        tenths = tenths.min(99.0);
    }
    let tenths = tenths.clamp(10.0, f64::from(u16::MAX)) as u16;
    Ok(FlareClass { letter, tenths })
}

/// Smallest flux carrying this class; 0 for FQ.
pub fn class_to_flux_lower_bound(class: &FlareClass) -> f64 {
    match class.letter.exponent() {
        None => 0.0,
        // Decimal parsing yields the double nearest to tenths x 10^(e-1),
        // so M1.0 maps to exactly the same value as the literal 1e-5.
        Some(e) => format!("{}e{}", class.tenths, e - 1).parse().expect("valid float literal"),
    }
}

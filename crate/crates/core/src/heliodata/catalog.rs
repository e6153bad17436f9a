use std::path::Path;

use chrono::{DateTime, Duration, NaiveDateTime, SecondsFormat, Utc};

use super::class::{flux_to_class, FlareClass};
use crate::error::{Error, Result};

pub const CATALOG_HEADER: [&str; 5] = ["peak_time", "peak_flux_wm2", "hg_lon_deg", "hg_lat_deg", "noaa_ar"];

/// Flux at and above which a window is labeled FL (M1.0).
pub const FLARE_FLUX_THRESHOLD: f64 = 1e-5;

/// Parses an ISO-8601 UTC timestamp. Offsets are converted to UTC; a bare
/// timestamp without a zone is taken as UTC.
pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc());
        }
    }
    Err(Error::Format(format!("invalid timestamp {s:?}")))
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// One catalogued flare.
#[derive(Clone, Debug, PartialEq)]
pub struct FlareEvent {
    pub peak_time: DateTime<Utc>,
    /// Peak GOES X-ray flux in W m^-2.
    pub peak_flux: f64,
    pub hg_longitude: f64,
    pub hg_latitude: f64,
    pub noaa_ar: Option<u32>,
}

impl FlareEvent {
    pub fn new(
        peak_time: DateTime<Utc>,
        peak_flux: f64,
        hg_longitude: f64,
        hg_latitude: f64,
        noaa_ar: Option<u32>,
    ) -> Result<Self> {
        if !(peak_flux > 0.0 && peak_flux.is_finite()) {
            return Err(Error::Input(format!("peak flux must be positive, got {peak_flux}")));
        }
        if !(hg_longitude.abs() <= 90.0) {
            return Err(Error::Input(format!("heliographic longitude {hg_longitude} outside [-90, 90]")));
        }
        if !hg_latitude.is_finite() {
            return Err(Error::Input(format!("heliographic latitude {hg_latitude} is not finite")));
        }
        Ok(FlareEvent { peak_time, peak_flux, hg_longitude, hg_latitude, noaa_ar })
    }

    pub fn class(&self) -> FlareClass {
        flux_to_class(self.peak_flux).expect("peak flux validated positive")
    }
}

/// Events sorted by peak time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalog {
    events: Vec<FlareEvent>,
}

/// Outcome of labeling one observation time.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowLabel {
    pub label: Label,
    pub window_max_class: FlareClass,
    pub window_max_event: Option<FlareEvent>,
}

/// Binary forecast target. `FL` is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    NF,
    FL,
}

impl Label {
    /// Class index used by the classifier head.
    pub fn index(self) -> usize {
        match self {
            Label::NF => 0,
            Label::FL => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Label::FL
        } else {
            Label::NF
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Label::NF => "NF",
            Label::FL => "FL",
        })
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "FL" => Ok(Label::FL),
            "NF" => Ok(Label::NF),
            other => Err(Error::Format(format!("invalid label {other:?} (expected FL or NF)"))),
        }
    }
}

impl Catalog {
    pub fn new(mut events: Vec<FlareEvent>) -> Self {
        events.sort_by_key(|e| e.peak_time);
        Catalog { events }
    }

    pub fn events(&self) -> &[FlareEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Labels the observation at `timestamp` from events peaking in
    /// `(timestamp, timestamp + window]`.
    pub fn label(&self, timestamp: DateTime<Utc>, window: Duration) -> WindowLabel {
        let end = timestamp + window;
        let lo = self.events.partition_point(|e| e.peak_time <= timestamp);
        let hi = self.events.partition_point(|e| e.peak_time <= end);
        // first event wins ties on flux
        let max = self.events[lo..hi]
            .iter()
            .fold(None::<&FlareEvent>, |best, e| match best {
                Some(b) if b.peak_flux >= e.peak_flux => Some(b),
                _ => Some(e),
            });
        match max {
            None => WindowLabel { label: Label::NF, window_max_class: FlareClass::FQ, window_max_event: None },
            Some(e) => WindowLabel {
                label: if e.peak_flux >= FLARE_FLUX_THRESHOLD { Label::FL } else { Label::NF },
                window_max_class: e.class(),
                window_max_event: Some(e.clone()),
            },
        }
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = reader.headers().map_err(csv_error)?;
        if header.iter().ne(CATALOG_HEADER) {
            return Err(Error::Format(format!(
                "catalog header must be {:?}, got {:?}",
                CATALOG_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut events = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(csv_error)?;
            let at = |e: Error| Error::Format(format!("catalog row {}: {e}", row + 1));
            let num = |i: usize| -> Result<f64> {
                record[i].parse().map_err(|_| Error::Format(format!("{} = {:?} is not a number", CATALOG_HEADER[i], &record[i])))
            };
            let noaa_ar = match &record[4] {
                "" => None,
                s => Some(s.parse().map_err(|_| at(Error::Format(format!("noaa_ar {s:?} is not an integer"))))?),
            };
            let event = FlareEvent::new(
                parse_timestamp(&record[0]).map_err(at)?,
                num(1).map_err(at)?,
                num(2).map_err(at)?,
                num(3).map_err(at)?,
                noaa_ar,
            )
            .map_err(at)?;
            events.push(event);
        }
        Ok(Catalog::new(events))
    }

    pub fn to_csv(&self) -> String {
        let mut out = CATALOG_HEADER.join(",");
        out.push('\n');
        for e in &self.events {
            let ar = e.noaa_ar.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{:e},{},{},{}\n",
                format_timestamp(&e.peak_time),
                e.peak_flux,
                e.hg_longitude,
                e.hg_latitude,
                ar
            ));
        }
        out
    }
}

/// Labels the observation at `timestamp` against `catalog` with a window of
/// `window_hours`.
pub fn label_sample(timestamp: DateTime<Utc>, catalog: &Catalog, window_hours: u32) -> WindowLabel {
    catalog.label(timestamp, Duration::hours(i64::from(window_hours)))
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

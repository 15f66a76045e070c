//! Hourly resampling and imputation of the physiological time series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_VARIABLES: usize = 17;

pub const VARIABLES: [&str; N_VARIABLES] = [
    "capillary_refill_rate",
    "diastolic_blood_pressure",
    "fraction_inspired_oxygen",
    "gcs_eye_opening",
    "gcs_motor_response",
    "gcs_total",
    "gcs_verbal_response",
    "glucose",
    "heart_rate",
    "height",
    "mean_blood_pressure",
    "oxygen_saturation",
    "respiratory_rate",
    "systolic_blood_pressure",
    "temperature",
    "weight",
    "ph",
];

/// Population-normal values used to fill gaps before the first observation.
pub const NORMAL_VALUES: [f64; N_VARIABLES] =
    [0.0, 59.0, 0.21, 4.0, 6.0, 15.0, 5.0, 128.0, 86.0, 170.0, 77.0, 98.0, 19.0, 118.0, 36.6, 81.0, 7.4];

/// Typical spread of each variable, used to standardize model inputs.
pub const VARIABLE_SCALES: [f64; N_VARIABLES] =
    [0.5, 14.0, 0.2, 1.0, 1.5, 3.5, 1.5, 45.0, 17.0, 10.0, 15.0, 3.0, 5.5, 22.0, 0.8, 23.0, 0.08];

/// One charted row; `None` cells were not measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsObservation {
    /// Hours since ICU in-time.
    pub hours: f64,
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RawSeries {
    pub hadm_id: u64,
    pub rows: Vec<TsObservation>,
}

/// Hourly series with the observation mask (`true` = observed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalTimeSeries {
    pub hadm_id: u64,
    pub hours: usize,
    /// `hours x N_VARIABLES`, row-major.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ClinicalTimeSeries {
    pub fn value(&self, hour: usize, var: usize) -> f64 {
        self.values[hour * N_VARIABLES + var]
    }

    pub fn observed(&self, hour: usize, var: usize) -> bool {
        self.mask[hour * N_VARIABLES + var]
    }

    /// Model input `[hours, 2 * N_VARIABLES]`: standardized values followed by
    /// the mask as 0/1 indicators.
    pub fn model_input(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.hours * 2 * N_VARIABLES);
        for h in 0..self.hours {
            for v in 0..N_VARIABLES {
                out.push((self.value(h, v) - NORMAL_VALUES[v]) / VARIABLE_SCALES[v]);
            }
            for v in 0..N_VARIABLES {
                out.push(if self.observed(h, v) { 1.0 } else { 0.0 });
            }
        }
        out
    }

    /// Only the originally observed cells, as a raw series on the hour grid.
    pub fn to_raw(&self) -> RawSeries {
        let rows = (0..self.hours)
            .filter(|h| (0..N_VARIABLES).any(|v| self.observed(*h, v)))
            .map(|h| TsObservation {
                hours: h as f64,
                values: (0..N_VARIABLES).map(|v| self.observed(h, v).then(|| self.value(h, v))).collect(),
            })
            .collect();
        RawSeries { hadm_id: self.hadm_id, rows }
    }
}

/// Resamples to `hours` hourly bins starting at ICU in-time. Within a bin the
/// latest observation wins; gaps are forward-filled and leading gaps take the
/// normal value. Observations outside `[0, hours)` are ignored.
pub fn impute_timeseries(raw: &RawSeries, hours: usize) -> Result<ClinicalTimeSeries> {
    if raw.rows.iter().all(|r| r.values.iter().all(Option::is_none)) {
        return Err(Error::EmptySequence(format!("stay {} has no time-series observations", raw.hadm_id)));
    }
    let mut binned: Vec<Option<(f64, f64)>> = vec![None; hours * N_VARIABLES];
    for row in &raw.rows {
        if row.values.len() != N_VARIABLES {
            return Err(Error::MalformedRecord(format!(
                "stay {}: expected {N_VARIABLES} variables, got {}",
                raw.hadm_id,
                row.values.len()
            )));
        }
        if !row.hours.is_finite() || row.hours < 0.0 || row.hours >= hours as f64 {
            continue;
        }
        let h = row.hours.floor() as usize;
        for (v, val) in row.values.iter().enumerate() {
            if let Some(x) = val {
                if !x.is_finite() {
                    return Err(Error::CorruptData(format!("stay {}: non-finite {}", raw.hadm_id, VARIABLES[v])));
                }
                let cell = &mut binned[h * N_VARIABLES + v];
                if cell.is_none_or(|(t, _)| row.hours >= t) {
                    *cell = Some((row.hours, *x));
                }
            }
        }
    }
    let mut values = vec![0.0; hours * N_VARIABLES];
    let mut mask = vec![false; hours * N_VARIABLES];
    for v in 0..N_VARIABLES {
        let mut last = NORMAL_VALUES[v];
        for h in 0..hours {
            let i = h * N_VARIABLES + v;
            if let Some((_, x)) = binned[i] {
                last = x;
                mask[i] = true;
            }
            values[i] = last;
        }
    }
    Ok(ClinicalTimeSeries { hadm_id: raw.hadm_id, hours, values, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(hours: f64, var: usize, x: f64) -> TsObservation {
        let mut values = vec![None; N_VARIABLES];
        values[var] = Some(x);
        TsObservation { hours, values }
    }

    #[test]
    fn forward_fill_and_normal_fill() {
        let raw = RawSeries { hadm_id: 1, rows: vec![obs(2.0, 8, 110.0), obs(5.0, 8, 95.0)] };
        let ts = impute_timeseries(&raw, 7).unwrap();
        let hr: Vec<f64> = (0..7).map(|h| ts.value(h, 8)).collect();
        assert_eq!(hr, vec![86.0, 86.0, 110.0, 110.0, 110.0, 95.0, 95.0]);
        let m: Vec<bool> = (0..7).map(|h| ts.observed(h, 8)).collect();
        assert_eq!(m, vec![false, false, true, false, false, true, false]);
        assert!((0..7).all(|h| ts.value(h, 0) == NORMAL_VALUES[0] && !ts.observed(h, 0)));
    }

    #[test]
    fn fully_observed_is_unchanged() {
        let rows: Vec<TsObservation> = (0..4)
            .map(|h| TsObservation {
                hours: h as f64,
                values: (0..N_VARIABLES).map(|v| Some((h * 100 + v) as f64)).collect(),
            })
            .collect();
        let ts = impute_timeseries(&RawSeries { hadm_id: 3, rows }, 4).unwrap();
        assert!(ts.mask.iter().all(|m| *m));
        for h in 0..4 {
            for v in 0..N_VARIABLES {
                assert_eq!(ts.value(h, v), (h * 100 + v) as f64);
            }
        }
    }

    #[test]
    fn latest_in_bin_wins_and_out_of_window_ignored() {
        let raw = RawSeries {
            hadm_id: 1,
            rows: vec![obs(1.7, 8, 120.0), obs(1.2, 8, 100.0), obs(-1.0, 8, 50.0), obs(9.0, 8, 70.0)],
        };
        let ts = impute_timeseries(&raw, 3).unwrap();
        assert_eq!(ts.value(0, 8), 86.0);
        assert_eq!(ts.value(1, 8), 120.0);
        assert_eq!(ts.value(2, 8), 120.0);
    }

    #[test]
    fn empty_series_errors() {
        assert!(impute_timeseries(&RawSeries { hadm_id: 1, rows: vec![] }, 4).is_err());
        let blank = TsObservation { hours: 0.0, values: vec![None; N_VARIABLES] };
        assert!(impute_timeseries(&RawSeries { hadm_id: 1, rows: vec![blank] }, 4).is_err());
    }

    #[test]
    fn model_input_layout() {
        let raw = RawSeries { hadm_id: 1, rows: vec![obs(0.0, 8, 103.0)] };
        let ts = impute_timeseries(&raw, 2).unwrap();
        let x = ts.model_input();
        assert_eq!(x.len(), 2 * 2 * N_VARIABLES);
        assert!((x[8] - 1.0).abs() < 1e-12);
        assert_eq!(x[N_VARIABLES + 8], 1.0);
        assert_eq!(x[2 * N_VARIABLES + N_VARIABLES + 8], 0.0);
        assert!((x[2 * N_VARIABLES + 8] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn mask_is_idempotent(cells in prop::collection::vec((0.0f64..12.0, 0usize..N_VARIABLES, -5.0f64..5.0), 1..40)) {
            let rows = cells.iter().map(|(h, v, x)| obs(*h, *v, *x)).collect();
            let ts = impute_timeseries(&RawSeries { hadm_id: 9, rows }, 12).unwrap();
            let again = impute_timeseries(&ts.to_raw(), 12).unwrap();
            prop_assert_eq!(&again.mask, &ts.mask);
            prop_assert_eq!(&again.values, &ts.values);
        }
    }
}

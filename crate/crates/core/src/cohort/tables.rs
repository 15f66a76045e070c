//! Delimited table formats for admissions, ICU stays and time series.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::timeseries::{RawSeries, TsObservation, N_VARIABLES, VARIABLES};
use super::{Admission, IcuStay};
use crate::error::{Error, Result};
use crate::notesproc::DATETIME_FORMAT;

fn parse_time(s: &str, what: &str) -> Result<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s.trim(), DATETIME_FORMAT)
        .map_err(|e| Error::MalformedRecord(format!("{what}: {s:?}: {e}")))
}

fn fmt_time(t: &NaiveDateTime) -> String {
    t.format(DATETIME_FORMAT).to_string()
}

#[derive(Serialize, Deserialize)]
struct AdmissionRow {
    hadm_id: u64,
    subject_id: u64,
    admit_time: String,
    discharge_time: String,
    death_time: String,
    age: f64,
}

/// Reads `hadm_id,subject_id,admit_time,discharge_time,death_time,age`.
pub fn read_admissions(path: &Path) -> Result<Vec<Admission>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: AdmissionRow = row?;
        let what = format!("admission {}", r.hadm_id);
        let adm = Admission {
            hadm_id: r.hadm_id,
            subject_id: r.subject_id,
            admit_time: parse_time(&r.admit_time, &what)?,
            discharge_time: parse_time(&r.discharge_time, &what)?,
            death_time: match r.death_time.trim() {
                "" => None,
                s => Some(parse_time(s, &what)?),
            },
            age: r.age,
        };
        if adm.admit_time >= adm.discharge_time {
            return Err(Error::MalformedRecord(format!("{what}: admit_time not before discharge_time")));
        }
        out.push(adm);
    }
    Ok(out)
}

pub fn write_admissions<W: Write>(w: W, rows: &[Admission]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["hadm_id", "subject_id", "admit_time", "discharge_time", "death_time", "age"])?;
    for a in rows {
        wtr.write_record([
            a.hadm_id.to_string(),
            a.subject_id.to_string(),
            fmt_time(&a.admit_time),
            fmt_time(&a.discharge_time),
            a.death_time.as_ref().map(fmt_time).unwrap_or_default(),
            a.age.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct IcuStayRow {
    icustay_id: u64,
    hadm_id: u64,
    intime: String,
    outtime: String,
    care_units: String,
}

/// Reads `icustay_id,hadm_id,intime,outtime,care_units`; care units are `;`-separated.
pub fn read_icustays(path: &Path) -> Result<Vec<IcuStay>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: IcuStayRow = row?;
        let what = format!("icustay {}", r.icustay_id);
        let stay = IcuStay {
            icustay_id: r.icustay_id,
            hadm_id: r.hadm_id,
            intime: parse_time(&r.intime, &what)?,
            outtime: parse_time(&r.outtime, &what)?,
            care_units: r.care_units.split(';').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect(),
        };
        if stay.intime >= stay.outtime {
            return Err(Error::MalformedRecord(format!("{what}: intime not before outtime")));
        }
        out.push(stay);
    }
    Ok(out)
}

pub fn write_icustays<W: Write>(w: W, rows: &[IcuStay]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["icustay_id", "hadm_id", "intime", "outtime", "care_units"])?;
    for s in rows {
        wtr.write_record([
            s.icustay_id.to_string(),
            s.hadm_id.to_string(),
            fmt_time(&s.intime),
            fmt_time(&s.outtime),
            s.care_units.join(";"),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads `hadm_id,hours,<17 variables>`; empty cells are unmeasured.
/// Rows are grouped per stay in file order.
pub fn read_timeseries(path: &Path) -> Result<BTreeMap<u64, RawSeries>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let expected: Vec<&str> = ["hadm_id", "hours"].into_iter().chain(VARIABLES).collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::MalformedRecord(format!("time-series header mismatch: {header:?}")));
    }
    let mut out: BTreeMap<u64, RawSeries> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::MalformedRecord(format!("time-series row {}: {what}", line + 2));
        let hadm_id: u64 = rec[0].trim().parse().map_err(|_| bad("hadm_id"))?;
        let hours: f64 = rec[1].trim().parse().map_err(|_| bad("hours"))?;
        let mut values = Vec::with_capacity(N_VARIABLES);
        for (i, cell) in rec.iter().skip(2).enumerate() {
            values.push(match cell.trim() {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|_| bad(VARIABLES[i]))?),
            });
        }
        out.entry(hadm_id)
            .or_insert_with(|| RawSeries { hadm_id, rows: Vec::new() })
            .rows
            .push(TsObservation { hours, values });
    }
    Ok(out)
}

pub fn write_timeseries<W: Write>(w: W, series: &[RawSeries]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let header: Vec<&str> = ["hadm_id", "hours"].into_iter().chain(VARIABLES).collect();
    wtr.write_record(&header)?;
    for s in series {
        for row in &s.rows {
            let mut rec = vec![s.hadm_id.to_string(), row.hours.to_string()];
            rec.extend(row.values.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, DATETIME_FORMAT).unwrap()
    }

    #[test]
    fn admissions_round_trip() {
        let rows = vec![
            Admission {
                hadm_id: 1,
                subject_id: 2,
                admit_time: t("2150-01-01 08:00:00"),
                discharge_time: t("2150-01-09 10:30:00"),
                death_time: None,
                age: 64.5,
            },
            Admission {
                hadm_id: 3,
                subject_id: 2,
                admit_time: t("2151-01-01 08:00:00"),
                discharge_time: t("2151-01-09 10:30:00"),
                death_time: Some(t("2151-01-09 10:30:00")),
                age: 65.1,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("admissions.csv");
        write_admissions(std::fs::File::create(&p).unwrap(), &rows).unwrap();
        assert_eq!(read_admissions(&p).unwrap(), rows);
    }

    #[test]
    fn icustays_round_trip() {
        let rows = vec![IcuStay {
            icustay_id: 7,
            hadm_id: 1,
            intime: t("2150-01-01 09:00:00"),
            outtime: t("2150-01-04 09:00:00"),
            care_units: vec!["MICU".into(), "SICU".into()],
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("icustays.csv");
        write_icustays(std::fs::File::create(&p).unwrap(), &rows).unwrap();
        assert_eq!(read_icustays(&p).unwrap(), rows);
    }

    #[test]
    fn timeseries_round_trip() {
        let mut values = vec![None; N_VARIABLES];
        values[3] = Some(4.0);
        values[16] = Some(7.35);
        let s = RawSeries { hadm_id: 5, rows: vec![TsObservation { hours: 1.25, values }] };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("timeseries.csv");
        write_timeseries(std::fs::File::create(&p).unwrap(), std::slice::from_ref(&s)).unwrap();
        let back = read_timeseries(&p).unwrap();
        assert_eq!(back[&5], s);
    }

    #[test]
    fn malformed_times_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("admissions.csv");
        std::fs::write(
            &p,
            "hadm_id,subject_id,admit_time,discharge_time,death_time,age\n1,2,yesterday,2150-01-01 00:00:00,,50\n",
        )
        .unwrap();
        assert!(matches!(read_admissions(&p), Err(Error::MalformedRecord(_))));
    }
}

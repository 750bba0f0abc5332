//! Subject-level data, observation patterns and CSV ingestion.
//!
//! Events file: `id,t0,l,r,delta_a,t,delta_d,<subject covariates...>`, one row
//! per subject, empty `r` meaning never diagnosed. Observations file:
//! `id,marker,time,value,<design covariates...>` in long format with ages in
//! years; the model's time transform is applied on load.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hazards::Transition;
use crate::spec::ModelSpec;

const EVENT_COLUMNS: [&str; 7] = ["id", "t0", "l", "r", "delta_a", "t", "delta_d"];
const OBS_COLUMNS: [&str; 4] = ["id", "marker", "time", "value"];
/// Slack for ages written with limited precision.
const AGE_TOLERANCE: f64 = 1e-9;

/// One marker measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub marker: usize,
    pub age: f64,
    /// Time on the transformed scale used by the design matrices.
    pub time: f64,
    pub value: f64,
    /// Raw design covariates aligned with [`Dataset::obs_covariates`].
    pub covariates: Vec<f64>,
}

/// Design rows aligned with a subject's observations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DesignRows {
    pub class: Vec<Vec<f64>>,
    pub common: Vec<Vec<f64>>,
    /// Marker-specific rows; empty for markers without their own terms.
    pub marker: Vec<Vec<f64>>,
    pub random: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub t0: f64,
    /// Age at the last visit seen healthy.
    pub l: f64,
    /// Age at the diagnosis visit, `+inf` when never diagnosed.
    pub r: f64,
    pub delta_a: bool,
    /// Age at death or end of follow-up.
    pub t_end: f64,
    pub delta_d: bool,
    /// Raw subject covariates aligned with [`Dataset::subject_covariates`].
    pub covariates: Vec<f64>,
    /// Class-membership covariates, without the intercept.
    pub class_covariates: Vec<f64>,
    /// Event covariates indexed by [`Transition::index`].
    pub event_covariates: [Vec<f64>; 3],
    pub obs: Vec<Observation>,
    pub design: DesignRows,
}

/// The six observation patterns for dementia and death.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, PartialOrd, Ord)]
pub enum Pattern {
    /// Diagnosed, then died.
    DementedDied = 1,
    /// Diagnosed, alive at end of follow-up.
    DementedCensored = 2,
    /// Died on the day of a visit where seen healthy.
    HealthyDied = 3,
    /// Seen healthy at the end of follow-up.
    HealthyCensored = 4,
    /// Dementia status unknown after the last visit, alive.
    UnknownCensored = 5,
    /// Dementia status unknown after the last visit, died.
    UnknownDied = 6,
}

impl Pattern {
    pub const ALL: [Pattern; 6] = [
        Self::DementedDied,
        Self::DementedCensored,
        Self::HealthyDied,
        Self::HealthyCensored,
        Self::UnknownCensored,
        Self::UnknownDied,
    ];

    pub fn number(self) -> u8 {
        self as u8
    }
}

impl SubjectRecord {
    /// A record with event data only; covariates and observations empty.
    pub fn events_only(id: &str, t0: f64, l: f64, r: Option<f64>, t_end: f64, delta_d: bool) -> Self {
        Self {
            id: id.to_string(),
            t0,
            l,
            r: r.unwrap_or(f64::INFINITY),
            delta_a: r.is_some(),
            t_end,
            delta_d,
            covariates: Vec::new(),
            class_covariates: Vec::new(),
            event_covariates: Default::default(),
            obs: Vec::new(),
            design: DesignRows::default(),
        }
    }

    pub fn pattern(&self) -> Pattern {
        match (self.delta_a, self.delta_d, self.l >= self.t_end) {
            (true, true, _) => Pattern::DementedDied,
            (true, false, _) => Pattern::DementedCensored,
            (false, true, true) => Pattern::HealthyDied,
            (false, false, true) => Pattern::HealthyCensored,
            (false, false, false) => Pattern::UnknownCensored,
            (false, true, false) => Pattern::UnknownDied,
        }
    }

    pub fn event_covariates(&self, tr: Transition) -> &[f64] {
        &self.event_covariates[tr.index()]
    }

    /// Checks the ordering and censoring invariants of the event data.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::InvalidSubject {
                id: self.id.clone(),
                msg,
            })
        };
        for (name, v) in [("t0", self.t0), ("l", self.l), ("t", self.t_end)] {
            if !v.is_finite() {
                return fail(format!("{name} must be finite"));
            }
        }
        if self.t0 < 0.0 {
            return fail(format!("entry age {} must be nonnegative", self.t0));
        }
        if self.t0 > self.l {
            return fail(format!("t0 = {} exceeds l = {}", self.t0, self.l));
        }
        if self.l > self.t_end {
            return fail(format!("l = {} exceeds t = {}", self.l, self.t_end));
        }
        if self.delta_a {
            if !self.r.is_finite() {
                return fail("diagnosed subject needs a finite r".into());
            }
            if self.r < self.l {
                return fail(format!("r = {} precedes l = {}", self.r, self.l));
            }
            if self.r > self.t_end {
                return fail(format!("r = {} exceeds t = {}", self.r, self.t_end));
            }
        } else if self.r != f64::INFINITY {
            return fail("r must be empty when delta_a = 0".into());
        }
        let last = self.r.min(self.t_end);
        for o in &self.obs {
            if !(o.age.is_finite() && o.value.is_finite()) {
                return fail("observation age and value must be finite".into());
            }
            if o.age < self.t0 - AGE_TOLERANCE || o.age > last + AGE_TOLERANCE {
                return fail(format!(
                    "observation at age {} outside [{}, {}]",
                    o.age, self.t0, last
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub subject_covariates: Vec<String>,
    pub obs_covariates: Vec<String>,
    pub subjects: Vec<SubjectRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Resolves covariate vectors and design rows for `spec`, then validates.
    pub fn prepare(&mut self, spec: &ModelSpec) -> Result<()> {
        spec.validate()?;
        let subj_idx = |name: &str| -> Result<usize> {
            self.subject_covariates
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Spec(format!("events file has no covariate column `{name}`")))
        };
        let class_idx: Vec<usize> = spec
            .class_covariates
            .iter()
            .map(|c| subj_idx(c))
            .collect::<Result<_>>()?;
        let mut event_idx: [Vec<usize>; 3] = Default::default();
        for tr in Transition::ALL {
            event_idx[tr.index()] = spec
                .event_covariates
                .get(tr)
                .iter()
                .map(|c| subj_idx(c))
                .collect::<Result<_>>()?;
        }
        let obs_idx: HashMap<String, usize> = spec
            .observation_covariates()
            .into_iter()
            .map(|c| {
                let i = self
                    .obs_covariates
                    .iter()
                    .position(|o| *o == c)
                    .ok_or_else(|| Error::Spec(format!("observation file has no covariate column `{c}`")))?;
                Ok((c, i))
            })
            .collect::<Result<_>>()?;

        for s in &mut self.subjects {
            s.class_covariates = class_idx.iter().map(|&i| s.covariates[i]).collect();
            for tr in Transition::ALL {
                s.event_covariates[tr.index()] =
                    event_idx[tr.index()].iter().map(|&i| s.covariates[i]).collect();
            }
            for o in &mut s.obs {
                o.time = spec.time_transform.to_time(o.age);
                if o.marker >= spec.n_markers() {
                    return Err(Error::InvalidSubject {
                        id: s.id.clone(),
                        msg: format!("marker index {} out of range", o.marker + 1),
                    });
                }
            }
            s.design = build_design(spec, &s.obs, &obs_idx);
            s.validate()?;
        }
        Ok(())
    }

    /// Shares of subjects falling in each observation pattern.
    pub fn pattern_counts(&self) -> [usize; 6] {
        let mut counts = [0; 6];
        for s in &self.subjects {
            counts[s.pattern() as usize - 1] += 1;
        }
        counts
    }
}

fn build_design(spec: &ModelSpec, obs: &[Observation], obs_idx: &HashMap<String, usize>) -> DesignRows {
    let row = |terms: &[crate::spec::Term], o: &Observation| -> Vec<f64> {
        terms
            .iter()
            .map(|term| {
                let cov = term
                    .covariate
                    .as_ref()
                    .map(|c| o.covariates[obs_idx[c]])
                    .unwrap_or(1.0);
                term.eval(o.time, cov)
            })
            .collect()
    };
    DesignRows {
        class: obs.iter().map(|o| row(&spec.class_terms, o)).collect(),
        common: obs.iter().map(|o| row(&spec.common_terms, o)).collect(),
        marker: obs.iter().map(|o| row(&spec.markers[o.marker].terms, o)).collect(),
        random: obs.iter().map(|o| row(&spec.random_terms, o)).collect(),
    }
}

/// Raw events row as read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRow {
    pub line: usize,
    pub record: SubjectRecord,
}

/// Raw observation row as read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRow {
    pub line: usize,
    pub id: String,
    pub marker: String,
    pub age: f64,
    pub value: Option<f64>,
    pub covariates: Vec<f64>,
}

fn parse_f64(field: &str, line: usize, col: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("column `{col}`: `{field}` is not a number"),
    })?;
    if v.is_nan() {
        return Err(Error::Parse {
            line,
            msg: format!("column `{col}` is NaN"),
        });
    }
    Ok(v)
}

fn parse_flag(field: &str, line: usize, col: &str) -> Result<bool> {
    match field.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Parse {
            line,
            msg: format!("column `{col}` must be 0 or 1, got `{other}`"),
        }),
    }
}

fn check_header(header: &csv::StringRecord, expected: &[&str]) -> Result<Vec<String>> {
    let names: Vec<String> = header.iter().map(|h| h.trim().to_string()).collect();
    if names.len() < expected.len() || names[..expected.len()] != *expected {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must start with `{}`", expected.join(",")),
        });
    }
    let extra = names[expected.len()..].to_vec();
    for (i, n) in extra.iter().enumerate() {
        if n.is_empty() || extra[..i].contains(n) {
            return Err(Error::Parse {
                line: 1,
                msg: format!("covariate column `{n}` is empty or duplicated"),
            });
        }
    }
    Ok(extra)
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

/// Parses an events CSV; returns covariate names and one record per subject.
pub fn parse_events<R: Read>(reader: R) -> Result<(Vec<String>, Vec<EventRow>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let cov_names = check_header(rdr.headers()?, &EVENT_COLUMNS)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = line_of(&rec);
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty subject id".into(),
            });
        }
        let t0 = parse_f64(&rec[1], line, "t0")?;
        let l = parse_f64(&rec[2], line, "l")?;
        let delta_a = parse_flag(&rec[4], line, "delta_a")?;
        let r = if rec[3].trim().is_empty() {
            f64::INFINITY
        } else {
            parse_f64(&rec[3], line, "r")?
        };
        let t_end = parse_f64(&rec[5], line, "t")?;
        let delta_d = parse_flag(&rec[6], line, "delta_d")?;
        let covariates = (7..rec.len())
            .map(|i| parse_f64(&rec[i], line, &cov_names[i - 7]))
            .collect::<Result<Vec<_>>>()?;
        let mut record = SubjectRecord::events_only(&id, t0, l, None, t_end, delta_d);
        record.r = r;
        record.delta_a = delta_a;
        record.covariates = covariates;
        record.validate()?;
        rows.push(EventRow { line, record });
    }
    Ok((cov_names, rows))
}

/// Parses an observations CSV. Empty `value` fields are kept as missing.
pub fn parse_observations<R: Read>(reader: R) -> Result<(Vec<String>, Vec<ObservationRow>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let cov_names = check_header(rdr.headers()?, &OBS_COLUMNS)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = line_of(&rec);
        let value = if rec[3].trim().is_empty() || rec[3].trim() == "NA" {
            None
        } else {
            Some(parse_f64(&rec[3], line, "value")?)
        };
        let age = parse_f64(&rec[2], line, "time")?;
        if !age.is_finite() {
            return Err(Error::Parse {
                line,
                msg: "observation time must be finite".into(),
            });
        }
        if value.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line,
                msg: "observation value must be finite".into(),
            });
        }
        let covariates = (4..rec.len())
            .map(|i| parse_f64(&rec[i], line, &cov_names[i - 4]))
            .collect::<Result<Vec<_>>>()?;
        rows.push(ObservationRow {
            line,
            id: rec[0].to_string(),
            marker: rec[1].to_string(),
            age,
            value,
            covariates,
        });
    }
    Ok((cov_names, rows))
}

/// Joins parsed events and observations into a prepared dataset.
pub fn assemble(
    events: (Vec<String>, Vec<EventRow>),
    observations: (Vec<String>, Vec<ObservationRow>),
    spec: &ModelSpec,
) -> Result<Dataset> {
    let (subject_covariates, event_rows) = events;
    let (obs_covariates, obs_rows) = observations;
    let mut index = HashMap::new();
    let mut subjects = Vec::with_capacity(event_rows.len());
    for row in event_rows {
        if index.insert(row.record.id.clone(), subjects.len()).is_some() {
            return Err(Error::Parse {
                line: row.line,
                msg: format!("subject `{}` appears twice", row.record.id),
            });
        }
        subjects.push(row.record);
    }
    for o in obs_rows {
        let Some(value) = o.value else { continue };
        let &i = index.get(&o.id).ok_or_else(|| Error::Parse {
            line: o.line,
            msg: format!("observation for unknown subject `{}`", o.id),
        })?;
        let marker = spec.marker_index(&o.marker).ok_or_else(|| Error::Parse {
            line: o.line,
            msg: format!("unknown marker `{}`", o.marker),
        })?;
        subjects[i].obs.push(Observation {
            marker,
            age: o.age,
            time: f64::NAN,
            value,
            covariates: o.covariates,
        });
    }
    for s in &mut subjects {
        s.obs.sort_by(|a, b| a.marker.cmp(&b.marker).then(a.age.total_cmp(&b.age)));
    }
    let mut ds = Dataset {
        subject_covariates,
        obs_covariates,
        subjects,
    };
    ds.prepare(spec)?;
    Ok(ds)
}

/// Parses events and observations from in-memory readers.
pub fn read_dataset<R1: Read, R2: Read>(events: R1, observations: R2, spec: &ModelSpec) -> Result<Dataset> {
    assemble(parse_events(events)?, parse_observations(observations)?, spec)
}

pub fn load_dataset(events: &Path, observations: &Path, spec: &ModelSpec) -> Result<Dataset> {
    let e = std::fs::File::open(events)?;
    let o = std::fs::File::open(observations)?;
    read_dataset(std::io::BufReader::new(e), std::io::BufReader::new(o), spec)
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Writes the events file; shortest round-trip float formatting keeps reloads bit-exact.
pub fn write_events<W: Write>(ds: &Dataset, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = EVENT_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(ds.subject_covariates.iter().cloned());
    wtr.write_record(&header)?;
    for s in &ds.subjects {
        let mut row = vec![
            s.id.clone(),
            fmt_num(s.t0),
            fmt_num(s.l),
            fmt_num(s.r),
            (s.delta_a as u8).to_string(),
            fmt_num(s.t_end),
            (s.delta_d as u8).to_string(),
        ];
        row.extend(s.covariates.iter().map(|v| fmt_num(*v)));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_observations<W: Write>(ds: &Dataset, spec: &ModelSpec, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = OBS_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(ds.obs_covariates.iter().cloned());
    wtr.write_record(&header)?;
    for s in &ds.subjects {
        for o in &s.obs {
            let mut row = vec![
                s.id.clone(),
                spec.markers[o.marker].name.clone(),
                fmt_num(o.age),
                fmt_num(o.value),
            ];
            row.extend(o.covariates.iter().map(|v| fmt_num(*v)));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::EventModel;

    fn spec() -> ModelSpec {
        ModelSpec::linear_trend(2, EventModel::IllnessDeath, true)
    }

    const EVENTS: &str = "id,t0,l,r,delta_a,t,delta_d,X\n\
        1,67,75,77,1,80,1,0\n\
        2,70,78,,0,82,1,1\n\
        3,66,86,,0,86,0,1\n";
    const OBS: &str = "id,marker,time,value,X\n\
        1,Y,67,30,0\n1,Y,69,28.5,0\n1,Y,77,20,0\n\
        2,Y,70,31,1\n2,Y,74,,1\n\
        3,Y,66,33,1\n";

    #[test]
    fn loads_and_classifies() {
        let ds = read_dataset(EVENTS.as_bytes(), OBS.as_bytes(), &spec()).unwrap();
        assert_eq!(ds.len(), 3);
        let s1 = &ds.subjects[0];
        assert_eq!(s1.pattern(), Pattern::DementedDied);
        assert_eq!(s1.obs.len(), 3);
        assert!((s1.obs[0].time - 0.2).abs() < 1e-15);
        assert_eq!(s1.design.class[0], vec![1.0, s1.obs[0].time]);
        let s2 = &ds.subjects[1];
        assert_eq!(s2.r, f64::INFINITY);
        assert_eq!(s2.obs.len(), 1, "missing marker values are dropped");
        assert_eq!(s2.pattern(), Pattern::UnknownDied);
        assert_eq!(ds.subjects[2].pattern(), Pattern::HealthyCensored);
        assert_eq!(s2.event_covariates(Transition::HealthyDead), &[1.0]);
    }

    #[test]
    fn rejects_invariant_violation_with_id() {
        let ev = "id,t0,l,r,delta_a,t,delta_d,X\n7,70,85,,0,80,1,0\n";
        match parse_events(ev.as_bytes()) {
            Err(Error::InvalidSubject { id, .. }) => assert_eq!(id, "7"),
            other => panic!("{other:?}"),
        }
        let ev = "id,t0,l,r,delta_a,t,delta_d,X\n8,70,75,74,1,80,1,0\n";
        assert!(matches!(parse_events(ev.as_bytes()), Err(Error::InvalidSubject { .. })));
    }

    #[test]
    fn malformed_row_names_line() {
        let ev = "id,t0,l,r,delta_a,t,delta_d,X\n1,70,75,,0,80,1,0\n2,70,abc,,0,80,1,0\n";
        match parse_events(ev.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let ev = "id,t0,l,r,delta_a,t,delta_d,X\n1,70,75,,2,80,1,0\n";
        assert!(matches!(parse_events(ev.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn observation_after_diagnosis_rejected() {
        let obs = "id,marker,time,value,X\n1,Y,79,20,0\n";
        let r = read_dataset(EVENTS.as_bytes(), obs.as_bytes(), &spec());
        assert!(matches!(r, Err(Error::InvalidSubject { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let s = spec();
        let ds = read_dataset(EVENTS.as_bytes(), OBS.as_bytes(), &s).unwrap();
        let mut ev = Vec::new();
        let mut ob = Vec::new();
        write_events(&ds, &mut ev).unwrap();
        write_observations(&ds, &s, &mut ob).unwrap();
        let back = read_dataset(ev.as_slice(), ob.as_slice(), &s).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn every_pattern_reachable() {
        let cases = [
            (SubjectRecord::events_only("a", 65.0, 70.0, Some(72.0), 75.0, true), Pattern::DementedDied),
            (SubjectRecord::events_only("b", 65.0, 70.0, Some(72.0), 75.0, false), Pattern::DementedCensored),
            (SubjectRecord::events_only("c", 65.0, 75.0, None, 75.0, true), Pattern::HealthyDied),
            (SubjectRecord::events_only("d", 65.0, 75.0, None, 75.0, false), Pattern::HealthyCensored),
            (SubjectRecord::events_only("e", 65.0, 70.0, None, 75.0, false), Pattern::UnknownCensored),
            (SubjectRecord::events_only("f", 65.0, 70.0, None, 75.0, true), Pattern::UnknownDied),
        ];
        for (s, p) in cases {
            s.validate().unwrap();
            assert_eq!(s.pattern(), p);
        }
    }
}

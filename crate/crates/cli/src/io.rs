//! Cohort CSV in a fixed column order:
//! `patient_id`, the fifteen features, `comorbidity_flag`, `baseline_lab`,
//! `action_mEq`, `next_lab`, `reward`. UTF-8 with LF line endings. Floats
//! use the shortest representation that round-trips, so rewriting a file
//! reproduces it byte for byte.

use std::io::{Read, Write};

use anyhow::{anyhow, bail, Context};

use dosing_ope::bandit::{BehaviorDataset, ClinicalContext, Gender, Sample, Task, FEATURE_NAMES};

pub fn header() -> Vec<&'static str> {
    let mut h = vec!["patient_id"];
    h.extend(FEATURE_NAMES);
    h.extend(["comorbidity_flag", "baseline_lab", "action_mEq", "next_lab", "reward"]);
    h
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_cohort<W: Write>(dataset: &BehaviorDataset, out: W) -> anyhow::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(header())?;
    let space = dataset.action_space();
    let mut samples: Vec<&Sample> = dataset.samples.iter().collect();
    samples.sort_by_key(|s| s.id);
    for s in samples {
        let c = &s.context;
        let mut rec = vec![s.id.to_string()];
        for (name, v) in FEATURE_NAMES.iter().zip(c.features()) {
            rec.push(if *name == "gender" {
                c.gender.as_str().to_string()
            } else {
                num(v)
            });
        }
        rec.push(if c.comorbidity_flag { "1" } else { "0" }.to_string());
        rec.push(num(c.baseline_lab));
        rec.push(num(space.dose(s.action_index)?));
        rec.push(num(s.next_lab));
        rec.push(num(s.reward));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn field(rec: &csv::StringRecord, i: usize, line: u64) -> anyhow::Result<&str> {
    rec.get(i)
        .ok_or_else(|| anyhow!("line {line}: missing column {}", header()[i]))
}

fn float(rec: &csv::StringRecord, i: usize, line: u64) -> anyhow::Result<f64> {
    let s = field(rec, i, line)?;
    s.trim()
        .parse::<f64>()
        .with_context(|| format!("line {line}: column {} is not a number: `{s}`", header()[i]))
}

pub fn read_cohort<R: Read>(task: Task, input: R) -> anyhow::Result<BehaviorDataset> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let expected = header();
    let got: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if got != expected {
        bail!("unexpected CSV header; expected {}", expected.join(","));
    }
    let space = task.action_space();
    let spec = task.reward_spec();
    let mut samples = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let id: u64 = field(&rec, 0, line)?
            .trim()
            .parse()
            .with_context(|| format!("line {line}: bad patient_id"))?;
        let gender = match field(&rec, 2, line)?.trim() {
            "F" | "f" | "0" => Gender::F,
            "M" | "m" | "1" => Gender::M,
            other => bail!("line {line}: gender must be F or M, got `{other}`"),
        };
        let context = ClinicalContext {
            age: float(&rec, 1, line)?,
            gender,
            weight: float(&rec, 3, line)?,
            height: float(&rec, 4, line)?,
            heart_rate: float(&rec, 5, line)?,
            respiratory_rate: float(&rec, 6, line)?,
            spo2: float(&rec, 7, line)?,
            systolic_bp: float(&rec, 8, line)?,
            diastolic_bp: float(&rec, 9, line)?,
            serum_creatinine: float(&rec, 10, line)?,
            nacl_09_given: float(&rec, 11, line)?,
            dextrose_5_given: float(&rec, 12, line)?,
            propofol_given: float(&rec, 13, line)?,
            norepinephrine_given: float(&rec, 14, line)?,
            insulin_given: float(&rec, 15, line)?,
            comorbidity_flag: match field(&rec, 16, line)?.trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => bail!("line {line}: comorbidity_flag must be 0 or 1, got `{other}`"),
            },
            baseline_lab: float(&rec, 17, line)?,
        };
        context.validate().with_context(|| format!("line {line}"))?;
        let action = space
            .index_of(float(&rec, 18, line)?)
            .with_context(|| format!("line {line}"))?;
        let next_lab = float(&rec, 19, line)?;
        let sample = Sample::new(id, context, action, next_lab, &spec).with_context(|| format!("line {line}"))?;
        let reward = float(&rec, 20, line)?;
        if (reward - sample.reward).abs() > 1e-12 {
            bail!(
                "line {line}: reward {reward} does not match the reward of next_lab {next_lab} ({})",
                sample.reward
            );
        }
        samples.push(sample);
    }
    Ok(BehaviorDataset::new(task, samples)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dosing_ope::sim::{generate_cohort, SimConfig};

    #[test]
    fn round_trip_is_byte_exact() {
        let cfg = SimConfig {
            n_patients: 50,
            ..SimConfig::default_for(Task::Sodium)
        };
        let ds = generate_cohort(&cfg).unwrap();
        let mut a = Vec::new();
        write_cohort(&ds, &mut a).unwrap();
        let back = read_cohort(Task::Sodium, a.as_slice()).unwrap();
        assert_eq!(back, ds);
        let mut b = Vec::new();
        write_cohort(&back, &mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(!text.contains('\r'));
        assert!(text.starts_with("patient_id,age,gender,weight,"));
        assert!(text
            .lines()
            .next()
            .unwrap()
            .ends_with("comorbidity_flag,baseline_lab,action_mEq,next_lab,reward"));
    }

    #[test]
    fn rejects_dose_outside_action_space() {
        let mut text = header().join(",");
        text.push_str("\n0,60,F,70,170,80,16,97,120,70,1,0,0,0,0,0,0,3.4,15,3.6,1\n");
        let err = read_cohort(Task::Potassium, text.as_bytes()).unwrap_err();
        assert!(format!("{err:#}").contains("line 2"));
    }
}

//! Text rendering of a counterfactual query.

use std::fmt::Write;

use crate::bandit::{ClinicalContext, Gender, Task};
use crate::error::{OpeError, Result};

/// Stand-in for the clinical reference paragraph. Deployments should supply
/// their own text listing the features most predictive of the lab.
pub const DEFAULT_DOMAIN_TEXT: &str = "Serum electrolyte concentrations after intravenous repletion depend on the \
dose delivered, the starting concentration, renal function (serum creatinine), body size, concurrent fluids \
such as 0.9% sodium chloride and 5% dextrose, and medications that shift electrolytes between compartments \
such as insulin. Consider each of these when estimating the post-treatment value.";

pub const HORIZON_HOURS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRequest {
    pub task: Task,
    pub context: ClinicalContext,
    pub counterfactual_dose: f64,
    pub infusion_rate: f64,
    pub horizon_hours: f64,
}

impl AnnotationRequest {
    /// Request with the task's infusion rate and the standard horizon.
    pub fn new(task: Task, context: ClinicalContext, dose: f64) -> Result<Self> {
        task.action_space().index_of(dose)?;
        Ok(AnnotationRequest {
            task,
            context,
            counterfactual_dose: dose,
            infusion_rate: task.infusion_rate(),
            horizon_hours: HORIZON_HOURS,
        })
    }
}

fn yes_no(v: f64) -> &'static str {
    if v > 0.0 {
        "yes"
    } else {
        "no"
    }
}

fn volume(v: f64) -> String {
    if v > 0.0 {
        format!("{} mL", num(v))
    } else {
        "none".to_string()
    }
}

/// Shortest decimal that round-trips, so prompts are byte-stable.
fn num(v: f64) -> String {
    format!("{v}")
}

fn lab_label(task: Task) -> &'static str {
    match task {
        Task::Potassium => "Potassium",
        Task::Sodium => "Sodium",
    }
}

pub fn build_prompt(request: &AnnotationRequest, domain_text: &str) -> Result<String> {
    let ctx = &request.context;
    let missing = ctx.missing_fields();
    if !missing.is_empty() {
        return Err(OpeError::InvalidInput(format!(
            "cannot build prompt, missing fields: {}",
            missing.join(", ")
        )));
    }
    let task = request.task;
    let lab = task.lab_name();
    let mut p = String::new();
    // Writing to a String cannot fail.
    let _ = writeln!(p, "TASK INFORMATION");
    let _ = writeln!(
        p,
        "You are assisting with {} repletion in an intensive care unit. The patient information below describes \
the patient's state four hours prior to treatment. Predict the patient's {lab} after the treatment described in \
the prediction query.",
        task.as_str()
    );
    let _ = writeln!(p);
    let _ = writeln!(p, "STATIC COVARIATES");
    let _ = writeln!(p, "- Age: {} years", num(ctx.age));
    let _ = writeln!(
        p,
        "- Gender: {}",
        match ctx.gender {
            Gender::F => "female",
            Gender::M => "male",
        }
    );
    let _ = writeln!(p, "- Weight: {} kg", num(ctx.weight));
    let _ = writeln!(p, "- Height: {} cm", num(ctx.height));
    let _ = writeln!(
        p,
        "- History of {}: {}",
        task.comorbidity_name(),
        if ctx.comorbidity_flag { "yes" } else { "no" }
    );
    let _ = writeln!(p);
    let _ = writeln!(p, "LABS AND MEDICINES");
    let _ = writeln!(p, "- {}: {} mEq/L", lab_label(task), num(ctx.baseline_lab));
    let _ = writeln!(p, "- Serum creatinine: {} mg/dL", num(ctx.serum_creatinine));
    let _ = writeln!(p, "- Heart rate: {} bpm", num(ctx.heart_rate));
    let _ = writeln!(p, "- Respiratory rate: {} breaths/min", num(ctx.respiratory_rate));
    let _ = writeln!(p, "- Oxygen saturation (pulse oximetry): {} %", num(ctx.spo2));
    let _ = writeln!(
        p,
        "- Blood pressure: {}/{} mmHg",
        num(ctx.systolic_bp),
        num(ctx.diastolic_bp)
    );
    let _ = writeln!(p, "- NaCl 0.9% administered: {}", volume(ctx.nacl_09_given));
    let _ = writeln!(p, "- Dextrose 5% administered: {}", volume(ctx.dextrose_5_given));
    let _ = writeln!(p, "- Propofol administered: {}", yes_no(ctx.propofol_given));
    let _ = writeln!(p, "- Norepinephrine administered: {}", yes_no(ctx.norepinephrine_given));
    let _ = writeln!(p, "- Insulin administered: {}", yes_no(ctx.insulin_given));
    let _ = writeln!(p);
    let _ = writeln!(p, "DOMAIN INFORMATION");
    let _ = writeln!(p, "{}", domain_text.trim());
    let _ = writeln!(p);
    let _ = writeln!(p, "PREDICTION QUERY");
    let _ = writeln!(
        p,
        "Dose: {} mEq of {}",
        num(request.counterfactual_dose),
        task.treatment_name()
    );
    let _ = writeln!(p, "Infusion rate: {} mEq/hr", num(request.infusion_rate));
    let _ = writeln!(
        p,
        "Prediction horizon: {} hours after the IV infusion concludes",
        num(request.horizon_hours)
    );
    let _ = writeln!(
        p,
        "Respond with a JSON object containing two keys: \"predicted_lab\" (the predicted {lab} in mEq/L, as a \
number) and \"justification\" (a brief explanation)."
    );
    Ok(p)
}

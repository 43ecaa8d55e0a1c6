//! Forward evaluation helpers and the central-difference gradient checker.

use std::collections::BTreeMap;

use crate::error::{NnError, Result};
use crate::params::ParameterSet;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Binds parameters into a tape as leaf nodes, remembering which node holds
/// which parameter so gradients can be read back by name.
pub struct Binder<'p> {
    params: &'p ParameterSet,
    ids: BTreeMap<String, NodeId>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Self {
            params,
            ids: BTreeMap::new(),
        }
    }

    /// Leaf node for a named parameter; repeated calls return the same node.
    pub fn param(&mut self, tape: &mut Tape, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let tensor = self.params.get(name)?.clone();
        let id = tape.leaf(tensor)?;
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn bound(&self) -> &BTreeMap<String, NodeId> {
        &self.ids
    }
}

/// A completed forward pass plus everything needed to pull gradients.
pub struct Evaluation {
    pub tape: Tape,
    pub output: NodeId,
    bound: BTreeMap<String, NodeId>,
}

impl Evaluation {
    pub fn output_value(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    pub fn loss(&self) -> f64 {
        self.output_value().item()
    }

    /// d(loss)/d(param) for every bound parameter; parameters the loss does
    /// not depend on get exact zeros.
    pub fn gradients(&self) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.tape.backward(self.output)?;
        let mut out = BTreeMap::new();
        for (name, &id) in &self.bound {
            let g = match grads.get(id) {
                Some(t) => t.clone(),
                None => Tensor::zeros(self.tape.value(id).shape().to_vec()),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

/// Run a graph-building closure against a parameter set.
pub fn evaluate<F>(params: &ParameterSet, build: F) -> Result<Evaluation>
where
    F: FnOnce(&mut Tape, &mut Binder) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let mut binder = Binder::new(params);
    let output = build(&mut tape, &mut binder)?;
    let bound = binder.ids;
    Ok(Evaluation {
        tape,
        output,
        bound,
    })
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: Option<(String, usize)>,
    pub checked_values: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// The builder must be a pure function of the parameter set (fix any noise
/// by seeding inside the closure). Relative error per element is
/// `|a - n| / max(1, |a|, |n|)`; the report carries the max over all
/// parameter elements.
pub fn grad_check<F>(params: &ParameterSet, step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &mut Binder) -> Result<NodeId>,
{
    let base = evaluate(params, &build)?;
    if !base.output_value().is_scalar() {
        return Err(NnError::NonScalarLoss {
            shape: base.output_value().shape().to_vec(),
        });
    }
    let analytic = base.gradients()?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: None,
        checked_values: 0,
    };
    for (name, grad) in &analytic {
        for i in 0..grad.numel() {
            let mut plus = params.clone();
            plus.get_mut(name)?.data_mut()[i] += step;
            let lp = evaluate(&plus, &build)?.loss();

            let mut minus = params.clone();
            minus.get_mut(name)?.data_mut()[i] -= step;
            let lm = evaluate(&minus, &build)?.loss();

            let numeric = (lp - lm) / (2.0 * step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.checked_values += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

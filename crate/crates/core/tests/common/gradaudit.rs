//! Gradient audit: single-precision tape gradients against central
//! differences of the same forward in double precision.

#![allow(dead_code)]

use paca_autograd::{Element, Tape, Var};
use paca_core::networks::NetworkParams;

/// A scalar loss over one or more parameter groups.
pub trait AuditedLoss {
    fn groups(&self) -> Vec<&NetworkParams<f32>>;
    fn build<T: Element>(&self, tape: &mut Tape<T>, groups: &[Vec<Var>]) -> Var;
}

#[derive(Debug, Clone)]
pub struct Probe {
    pub group: usize,
    pub tensor: String,
    pub element: usize,
    pub analytic_f32: f64,
    pub analytic_f64: f64,
    pub finite_diff: f64,
}

impl Probe {
    pub fn rel_err_f32(&self) -> f64 {
        (self.analytic_f32 - self.finite_diff).abs() / self.finite_diff.abs().max(1e-12)
    }

    pub fn rel_err_f64(&self) -> f64 {
        (self.analytic_f64 - self.finite_diff).abs() / self.finite_diff.abs().max(1e-12)
    }
}

fn gradients<T: Element, L: AuditedLoss>(loss: &L, groups: &[NetworkParams<T>]) -> (f64, Vec<Vec<Vec<f64>>>) {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Vec<Var>> = groups.iter().map(|g| g.bind(&mut tape, true)).collect();
    let out = loss.build(&mut tape, &vars);
    let value = tape.item(out).as_f64();
    let grads = tape.backward(out);
    let per = vars
        .iter()
        .zip(groups)
        .map(|(vs, g)| {
            vs.iter()
                .zip(g.iter())
                .map(|(v, p)| match grads.get(*v) {
                    Some(t) => t.data().iter().map(|x| x.as_f64()).collect(),
                    None => vec![0.0; p.tensor.len()],
                })
                .collect()
        })
        .collect();
    (value, per)
}

fn value_f64<L: AuditedLoss>(loss: &L, groups: &[NetworkParams<f64>]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Vec<Var>> = groups.iter().map(|g| g.bind(&mut tape, false)).collect();
    let out = loss.build(&mut tape, &vars);
    tape.item(out)
}

/// Picks the `n` tensors with the largest gradient norms and probes the
/// largest-magnitude element of each. Candidates whose central difference
/// changes between steps `h` and `h / 10` sit next to a ReLU or |x| kink,
/// where the derivative is undefined; those are skipped.
pub fn audit<L: AuditedLoss>(loss: &L, n: usize) -> Vec<Probe> {
    let g32: Vec<NetworkParams<f32>> = loss.groups().into_iter().cloned().collect();
    let g64: Vec<NetworkParams<f64>> = g32.iter().map(|g| g.cast()).collect();
    let (_, grad32) = gradients(loss, &g32);
    let (_, grad64) = gradients(loss, &g64);
    let mut candidates = Vec::new();
    for (gi, tensors) in grad64.iter().enumerate() {
        for (ti, t) in tensors.iter().enumerate() {
            let (ei, mag) =
                t.iter().enumerate().map(|(i, v)| (i, v.abs())).fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
            if mag > 0.0 {
                candidates.push((gi, ti, ei, mag));
            }
        }
    }
    candidates.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap());
    let mut probes = Vec::new();
    for (gi, ti, ei, _) in candidates {
        if probes.len() == n {
            break;
        }
        let base = g64[gi].at(ti).tensor.data()[ei];
        let eval = |delta: f64| {
            let mut groups = g64.clone();
            groups[gi].at_mut(ti).tensor.data_mut()[ei] = base + delta;
            value_f64(loss, &groups)
        };
        let h = 1e-6 * base.abs().max(1.0);
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let fd_fine = (eval(h / 10.0) - eval(-h / 10.0)) / (0.2 * h);
        if (fd - fd_fine).abs() > 1e-5 * fd.abs().max(1e-12) {
            continue;
        }
        probes.push(Probe {
            group: gi,
            tensor: g64[gi].at(ti).name.clone(),
            element: ei,
            analytic_f32: grad32[gi][ti][ei],
            analytic_f64: grad64[gi][ti][ei],
            finite_diff: fd,
        });
    }
    probes
}

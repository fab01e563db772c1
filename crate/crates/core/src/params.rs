//! Flat views over named parameter blocks, shared by the optimizer and the
//! checkpoint format.

use crate::model::{Likelihood, Model};
use crate::vi::{CovParams, MoGPosterior};

pub trait Parameterized {
    /// Visits every trainable block in a fixed order.
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn pack(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, v| out.extend_from_slice(v));
        out
    }

    fn unpack(&mut self, values: &[f64]) {
        let mut off = 0;
        self.visit(&mut |_, v| {
            v.copy_from_slice(&values[off..off + v.len()]);
            off += v.len();
        });
        assert_eq!(off, values.len(), "parameter vector length mismatch");
    }

    fn blocks(&mut self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |name, v| out.push((name.to_string(), v.len())));
        out
    }

    fn zero(&mut self) {
        self.visit(&mut |_, v| v.iter_mut().for_each(|x| *x = 0.0));
    }
}

fn visit_kernel(
    name: &str,
    k: &mut crate::kernel::KernelExpr,
    f: &mut dyn FnMut(&str, &mut [f64]),
) {
    let mut p = k.params();
    f(name, &mut p);
    k.set_params(&p);
}

impl Parameterized for Model {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        let train_z = self.train_inducing;
        for g in &mut self.groups {
            visit_kernel(
                &format!("group{}.input_kernel", g.id),
                &mut g.input_kernel.expr,
                f,
            );
            if let Some(k) = g.fn_kernel.as_mut() {
                visit_kernel(&format!("group{}.fn_kernel", g.id), k, f);
            }
            if train_z {
                f(
                    &format!("group{}.inducing", g.id),
                    g.inducing.as_mut_slice(),
                );
            }
        }
        f("noise.log_variance", self.noise.log_noise.as_mut_slice());
        if let Likelihood::Lcm { weights } = &mut self.likelihood {
            f("lcm.weights", weights.as_mut_slice());
        }
    }
}

fn visit_lower(name: &str, m: &mut nalgebra::DMatrix<f64>, f: &mut dyn FnMut(&str, &mut [f64])) {
    let n = m.nrows();
    let mut tmp = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        for i in j..n {
            tmp.push(m[(i, j)]);
        }
    }
    f(name, &mut tmp);
    let mut it = tmp.into_iter();
    for j in 0..n {
        for i in j..n {
            m[(i, j)] = it.next().unwrap();
        }
    }
}

impl Parameterized for MoGPosterior {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("posterior.logits", self.logits.as_mut_slice());
        for (k, comp) in self.components.iter_mut().enumerate() {
            for (r, gp) in comp.iter_mut().enumerate() {
                f(
                    &format!("posterior{k}.group{r}.mean"),
                    gp.mean.as_mut_slice(),
                );
                match &mut gp.cov {
                    CovParams::Diagonal { log_var } => f(
                        &format!("posterior{k}.group{r}.log_var"),
                        log_var.as_mut_slice(),
                    ),
                    CovParams::KronFull { hh, zz } => {
                        visit_lower(&format!("posterior{k}.group{r}.chol_hh"), hh, f);
                        visit_lower(&format!("posterior{k}.group{r}.chol_zz"), zz, f);
                    }
                }
            }
        }
    }
}

/// Model and posterior viewed as one parameter set.
pub struct Joint<'a> {
    pub model: &'a mut Model,
    pub posterior: &'a mut MoGPosterior,
}

impl Parameterized for Joint<'_> {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.model.visit(f);
        self.posterior.visit(f);
    }
}

use crate::autograd::{Graph, Var};
use crate::discriminators::LogitMaps;
use crate::error::{Error, Result};
use crate::tensor::Real;

fn check_topology<T: Real>(real: &LogitMaps<T>, fake: &LogitMaps<T>) -> Result<()> {
    if real.len() != fake.len() {
        return Err(Error::Topology(format!(
            "{} real maps vs {} fake maps",
            real.len(),
            fake.len()
        )));
    }
    for (r, f) in real.maps.iter().zip(&fake.maps) {
        if r.name != f.name {
            return Err(Error::Topology(format!("sub {} paired with {}", r.name, f.name)));
        }
    }
    Ok(())
}

/// Discriminator hinge loss summed over sub-discriminators:
/// `sum_s mean(max(0, 1 - D_s(y))) + mean(max(0, 1 + D_s(G(x))))`.
pub fn hinge_d_loss<T: Real>(real: &LogitMaps<T>, fake: &LogitMaps<T>) -> Result<f64> {
    check_topology(real, fake)?;
    let mean_hinge = |vals: &[T], sign: f64| {
        vals.iter()
            .map(|v| (1.0 + sign * v.to_f64_lossy()).max(0.0))
            .sum::<f64>()
            / vals.len() as f64
    };
    Ok(real
        .maps
        .iter()
        .zip(&fake.maps)
        .map(|(r, f)| mean_hinge(r.values.data(), -1.0) + mean_hinge(f.values.data(), 1.0))
        .sum())
}

/// Generator hinge loss summed over sub-discriminators: `sum_s mean(-D_s(G(x)))`.
pub fn hinge_g_loss<T: Real>(fake: &LogitMaps<T>) -> f64 {
    -fake.means().iter().map(|m| m.to_f64_lossy()).sum::<f64>()
}

/// Recorded form of [`hinge_d_loss`] over per-sub logit nodes.
pub fn hinge_d_loss_graph<T: Real>(graph: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Topology(format!(
            "{} real maps vs {} fake maps",
            real.len(),
            fake.len()
        )));
    }
    let mut terms = Vec::with_capacity(2 * real.len());
    for (&r, &f) in real.iter().zip(fake) {
        terms.push(graph.hinge_real(r));
        terms.push(graph.hinge_fake(f));
    }
    Ok(graph.sum(&terms))
}

/// Recorded form of [`hinge_g_loss`].
pub fn hinge_g_loss_graph<T: Real>(graph: &mut Graph<T>, fake: &[Var]) -> Var {
    let terms: Vec<Var> = fake.iter().map(|&f| graph.neg_mean(f)).collect();
    graph.sum(&terms)
}

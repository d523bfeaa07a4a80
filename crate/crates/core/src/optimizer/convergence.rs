use super::params::ConvergenceMode;

/// Relative energy change `|E_prev - E| / (|E_prev| + 1)`.
pub fn relative_change(prev: f64, cur: f64) -> f64 {
    (prev - cur).abs() / (prev.abs() + 1.0)
}

/// Mean of the last three relative changes of `energies`, if there are at
/// least four entries.
pub fn mean_recent_change(energies: &[f64]) -> Option<f64> {
    if energies.len() < 4 {
        return None;
    }
    let tail = &energies[energies.len() - 4..];
    Some(tail.windows(2).map(|p| relative_change(p[0], p[1])).sum::<f64>() / 3.0)
}

/// Quantities available to the convergence test at one iterate.
#[derive(Debug, Clone, Copy, Default)]
pub struct Metrics<'a> {
    /// `sqrt(tr<∇Eᵀ∇E>)`.
    pub grad_norm: Option<f64>,
    /// Mean absolute entry of `∇E` over all `N × N_g` values.
    pub mean_abs: Option<f64>,
    /// Energies at orthonormal iterates, oldest first.
    pub energies: &'a [f64],
}

/// Deterministic convergence decision. Missing inputs mean "not converged".
pub fn check_convergence(mode: ConvergenceMode, tol: f64, m: &Metrics<'_>) -> bool {
    match mode {
        ConvergenceMode::GradNorm => m.grad_norm.is_some_and(|g| g < tol),
        ConvergenceMode::MeanAbs => m.mean_abs.is_some_and(|g| g < tol),
        ConvergenceMode::EnergyChange => mean_recent_change(m.energies).is_some_and(|d| d < tol),
    }
}

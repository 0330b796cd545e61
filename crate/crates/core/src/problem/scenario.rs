use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Bounds, LinearSystem, MpcInstance};
use crate::error::{Error, Result};

/// The synthetic plants that stand in for physical robots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioId {
    DoubleIntegrator,
    MassSpringChain,
    QuadrotorLinear,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 3] = [
        ScenarioId::DoubleIntegrator,
        ScenarioId::MassSpringChain,
        ScenarioId::QuadrotorLinear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioId::DoubleIntegrator => "double-integrator",
            ScenarioId::MassSpringChain => "mass-spring-chain",
            ScenarioId::QuadrotorLinear => "quadrotor-linear",
        }
    }

    /// State and input dimensions.
    pub fn dims(self) -> (usize, usize) {
        match self {
            ScenarioId::DoubleIntegrator => (2, 1),
            ScenarioId::MassSpringChain => (8, 2),
            ScenarioId::QuadrotorLinear => (12, 4),
        }
    }

    pub fn default_horizon(self) -> usize {
        match self {
            ScenarioId::DoubleIntegrator => 20,
            ScenarioId::MassSpringChain => 15,
            ScenarioId::QuadrotorLinear => 10,
        }
    }

    pub fn system(self) -> LinearSystem {
        let (a, b) = match self {
            ScenarioId::DoubleIntegrator => {
                let dt = 0.1;
                (
                    DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
                    DMatrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]),
                )
            }
            ScenarioId::MassSpringChain => mass_spring_chain(),
            ScenarioId::QuadrotorLinear => quadrotor_hover(),
        };
        LinearSystem::new(a, b).expect("scenario dynamics are well formed")
    }

    pub fn default_bounds(self) -> Bounds {
        match self {
            ScenarioId::DoubleIntegrator => Bounds::symmetric(&[5.0, 2.0], &[1.0]),
            ScenarioId::MassSpringChain => {
                Bounds::symmetric(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], &[0.5, 0.5])
            }
            ScenarioId::QuadrotorLinear => Bounds::symmetric(
                &[5.0, 5.0, 5.0, 0.3, 0.3, 0.5, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0],
                &[4.0, 0.04, 0.04, 0.02],
            ),
        }
    }

    /// Diagonals of the stage state weight, input weight and terminal weight.
    fn weights(self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        match self {
            ScenarioId::DoubleIntegrator => (vec![1.0, 0.1], vec![1.0], vec![10.0, 1.0]),
            ScenarioId::MassSpringChain => {
                let q = vec![10.0, 10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.0];
                let qn = q.iter().map(|v| 5.0 * v).collect();
                (q, vec![0.1, 0.1], qn)
            }
            ScenarioId::QuadrotorLinear => {
                let q = vec![10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1];
                let qn = q.iter().map(|v| 5.0 * v).collect();
                (q, vec![0.1, 10.0, 10.0, 10.0], qn)
            }
        }
    }

    /// Half-widths of the box x0 is drawn from.
    fn x0_spread(self) -> Vec<f64> {
        match self {
            ScenarioId::DoubleIntegrator => vec![4.0, 0.5],
            ScenarioId::MassSpringChain => vec![0.5, 0.5, 0.5, 0.5, 0.3, 0.3, 0.3, 0.3],
            ScenarioId::QuadrotorLinear => {
                vec![2.0, 2.0, 2.0, 0.05, 0.05, 0.1, 0.5, 0.5, 0.5, 0.2, 0.2, 0.2]
            }
        }
    }

    /// Reference offset amplitude per state component; zero means the
    /// component is regulated to zero.
    fn reference_amplitude(self) -> Vec<f64> {
        match self {
            ScenarioId::DoubleIntegrator => vec![3.0, 0.0],
            ScenarioId::MassSpringChain => vec![0.6, 0.6, 0.6, 0.6, 0.0, 0.0, 0.0, 0.0],
            ScenarioId::QuadrotorLinear => {
                let mut a = vec![0.0; 12];
                a[..3].copy_from_slice(&[2.0, 2.0, 2.0]);
                a
            }
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

/// Overrides for scenario defaults. Unset fields fall back to the scenario's
/// own values or to seeded random draws.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioParams {
    pub horizon: Option<usize>,
    pub bounds: Option<Bounds>,
    pub x0: Option<Vec<f64>>,
    pub reference: Option<Vec<Vec<f64>>>,
    /// Multiplies the default reference amplitude.
    pub reference_scale: Option<f64>,
}

/// Builds a feasible, seeded instance of `scenario`.
pub fn build_mpc_instance(scenario: ScenarioId, params: &ScenarioParams, seed: u64) -> Result<MpcInstance> {
    let (n, m) = scenario.dims();
    let horizon = params.horizon.unwrap_or(scenario.default_horizon());
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let bounds = params.bounds.clone().unwrap_or_else(|| scenario.default_bounds());
    bounds.validate(n, m)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Draw everything unconditionally so overrides do not shift the stream.
    let spread = scenario.x0_spread();
    let x0_draw: Vec<f64> = spread.iter().map(|s| rng.random_range(-1.0..=1.0) * s).collect();
    let scale = params.reference_scale.unwrap_or(1.0);
    let offsets = filtered_setpoints(&mut rng, &scenario.reference_amplitude(), scale, horizon);

    let x0 = match &params.x0 {
        Some(v) if v.len() != n => {
            return Err(Error::Dimension(format!("x0 override has {} entries, expected {n}", v.len())))
        }
        Some(v) => DVector::from_column_slice(v),
        None => DVector::from_vec(x0_draw),
    };
    // Tracked components follow x0 plus the filtered offsets, kept inside
    // the state box; the others are regulated to zero.
    let amplitude = scenario.reference_amplitude();
    let ref_draw: Vec<DVector<f64>> = offsets
        .into_iter()
        .map(|off| {
            DVector::from_fn(n, |i, _| {
                if amplitude[i] == 0.0 {
                    0.0
                } else {
                    let margin = 0.1 * (bounds.state_ub[i] - bounds.state_lb[i]);
                    (x0[i] + off[i]).clamp(bounds.state_lb[i] + margin, bounds.state_ub[i] - margin)
                }
            })
        })
        .collect();
    let x_ref = match &params.reference {
        Some(r) => {
            if r.len() != horizon + 1 || r.iter().any(|s| s.len() != n) {
                return Err(Error::Dimension("reference override shape".into()));
            }
            r.iter().map(|s| DVector::from_column_slice(s)).collect()
        }
        None => ref_draw,
    };

    let (q, r, qn) = scenario.weights();
    MpcInstance::new(
        scenario,
        seed,
        scenario.system(),
        horizon,
        DMatrix::from_diagonal(&DVector::from_vec(q)),
        DMatrix::from_diagonal(&DVector::from_vec(r)),
        DMatrix::from_diagonal(&DVector::from_vec(qn)),
        x0,
        x_ref,
        bounds,
    )
}

/// Offsets from x0: a random step per component passed through a
/// first-order low-pass filter, starting at zero.
fn filtered_setpoints(
    rng: &mut ChaCha8Rng,
    amplitude: &[f64],
    scale: f64,
    horizon: usize,
) -> Vec<DVector<f64>> {
    const SMOOTHING: f64 = 0.4;
    let n = amplitude.len();
    let mut out = vec![DVector::zeros(n); horizon + 1];
    for (i, &amp) in amplitude.iter().enumerate() {
        let target = rng.random_range(-1.0..=1.0) * amp * scale;
        let mut level = 0.0;
        for r in out.iter_mut().skip(1) {
            level += SMOOTHING * (target - level);
            r[i] = level;
        }
    }
    out
}

/// Zero-order-hold discretization of `ẋ = F x + G u` over `dt`.
fn zoh(f: &DMatrix<f64>, g: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (f.nrows(), g.ncols());
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(f * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(g * dt));
    let e = aug.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned())
}

/// Four unit masses between two walls, springs k = 1 and light damping;
/// forces act on the two outer masses. State: positions then velocities.
fn mass_spring_chain() -> (DMatrix<f64>, DMatrix<f64>) {
    const MASSES: usize = 4;
    let (k, c) = (1.0, 0.1);
    let n = 2 * MASSES;
    let mut f = DMatrix::zeros(n, n);
    for i in 0..MASSES {
        f[(i, MASSES + i)] = 1.0;
        f[(MASSES + i, i)] = -2.0 * k;
        if i > 0 {
            f[(MASSES + i, i - 1)] = k;
        }
        if i + 1 < MASSES {
            f[(MASSES + i, i + 1)] = k;
        }
        f[(MASSES + i, MASSES + i)] = -c;
    }
    let mut g = DMatrix::zeros(n, 2);
    g[(MASSES, 0)] = 1.0;
    g[(n - 1, 1)] = 1.0;
    zoh(&f, &g, 0.2)
}

/// Hover linearization of a quadrotor. State: position, roll/pitch/yaw,
/// linear velocity, body rates. Input: thrust deviation and three torques.
fn quadrotor_hover() -> (DMatrix<f64>, DMatrix<f64>) {
    let (grav, mass) = (9.81, 0.5);
    let inertia = [0.005, 0.005, 0.01];
    let mut f = DMatrix::zeros(12, 12);
    for i in 0..3 {
        f[(i, 6 + i)] = 1.0;
        f[(3 + i, 9 + i)] = 1.0;
    }
    f[(6, 4)] = grav;
    f[(7, 3)] = -grav;
    let mut g = DMatrix::zeros(12, 4);
    g[(8, 0)] = 1.0 / mass;
    for i in 0..3 {
        g[(9 + i, 1 + i)] = 1.0 / inertia[i];
    }
    zoh(&f, &g, 0.05)
}

//! Isothermal pseudo-two-dimensional cell model, used as a simulated plant.
//!
//! Finite volumes along x in every layer and spherical shells along r in
//! every electrode volume. Unknowns split into differential fields (solid
//! and electrolyte concentrations) and algebraic fields (solid potential,
//! electrolyte potential, pore-wall flux). Each implicit step solves both
//! with a damped Newton iteration on one monolithic residual.
//!
//! Sign convention as in the SPMe: positive current discharges the cell,
//! x runs from the cathode collector to the anode collector, and a positive
//! flux j leaves the particle.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::cell::{open_unit, positive};
use crate::config::{CellConfig, ParameterVector};
use crate::error::{Electrode, Error, FieldError, Result};
use crate::model::ocp::{kappa_electrolyte, ocp_negative, ocp_positive};

/// Everything the P2D plant needs. The conductivities and meshes have no
/// SPMe counterpart and must be supplied by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P2dConfig {
    pub cell: CellConfig,
    pub params: ParameterVector,
    /// S/m
    pub solid_conductivity_pos: f64,
    pub solid_conductivity_neg: f64,
    /// Volumes in the cathode, separator and anode.
    pub mesh: [usize; 3],
    pub radial_shells: usize,
}

impl P2dConfig {
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors: Vec<FieldError> = self
            .cell
            .validate()
            .into_iter()
            .filter(|e| e.field != "volumes_per_layer")
            .collect();
        errors.extend(self.params.validate("parameters"));
        positive(&mut errors, "p2d.solid_conductivity_pos", self.solid_conductivity_pos);
        positive(&mut errors, "p2d.solid_conductivity_neg", self.solid_conductivity_neg);
        for (name, n) in ["cathode", "separator", "anode"].iter().zip(self.mesh) {
            if n < 3 {
                errors.push(FieldError {
                    field: format!("p2d.mesh.{name}"),
                    message: format!("must be at least 3, got {n}"),
                });
            }
        }
        if self.radial_shells < 3 {
            errors.push(FieldError {
                field: "p2d.radial_shells".into(),
                message: format!("must be at least 3, got {}", self.radial_shells),
            });
        }
        open_unit(&mut errors, "separator.porosity", self.cell.separator.porosity);
        errors.dedup();
        errors
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P2dState {
    /// Solid concentration, shells inside-out for each electrode volume,
    /// cathode volumes first. mol/m^3
    pub cs: Vec<f64>,
    /// mol/m^3
    pub ce: Vec<f64>,
    /// Solid potential of each electrode volume, cathode first. V
    pub phi_s: Vec<f64>,
    /// V
    pub phi_e: Vec<f64>,
    /// Pore-wall flux of every volume, zero in the separator. mol/(m^2 s)
    pub j: Vec<f64>,
    /// Current the algebraic fields belong to. A
    pub current: f64,
}

impl P2dState {
    pub fn differential(&self) -> Vec<f64> {
        [self.cs.as_slice(), &self.ce].concat()
    }

    pub fn algebraic(&self) -> Vec<f64> {
        [self.phi_s.as_slice(), &self.phi_e, &self.j].concat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSettings {
    pub max_iterations: usize,
    pub rtol: f64,
    /// Absolute tolerances for concentrations, potentials and fluxes.
    pub atol_concentration: f64,
    pub atol_potential: f64,
    pub atol_flux: f64,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            max_iterations: 25,
            rtol: 1e-10,
            atol_concentration: 1e-7,
            atol_potential: 1e-10,
            atol_flux: 1e-15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Step,
    Init,
}

#[derive(Debug)]
struct Factored {
    kind: Kind,
    alpha: f64,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    row_scale: Vec<f64>,
}

#[derive(Debug)]
pub struct P2d {
    cfg: P2dConfig,
    np: usize,
    ns: usize,
    nn: usize,
    nr: usize,
    dx: Vec<f64>,
    eps: Vec<f64>,
    /// Specific interfacial area, zero in the separator. 1/m
    area: Vec<f64>,
    /// Interface conductances of electrolyte diffusion, m/s.
    diffusion: Vec<f64>,
    /// ε^p of each volume.
    brugg: Vec<f64>,
    /// Shell volumes / 4π and face areas / 4π of each electrode.
    shells: [(Vec<f64>, Vec<f64>, f64); 2],
    newton: NewtonSettings,
    cache: Option<Factored>,
    steps: usize,
}

impl P2d {
    pub fn new(cfg: &P2dConfig) -> Result<Self> {
        let errors = cfg.validate();
        if !errors.is_empty() {
            return Err(Error::Invalid(errors));
        }
        let c = &cfg.cell;
        let [np, ns, nn] = cfg.mesh;
        let nr = cfg.radial_shells;
        let p = cfg.params.bruggeman;
        let mut dx = Vec::new();
        let mut eps = Vec::new();
        let mut area = Vec::new();
        for (n, thickness, porosity, a) in [
            (np, c.positive.thickness, c.positive.porosity, c.positive.specific_area()),
            (ns, c.separator.thickness, c.separator.porosity, 0.0),
            (nn, c.negative.thickness, c.negative.porosity, c.negative.specific_area()),
        ] {
            for _ in 0..n {
                dx.push(thickness / n as f64);
                eps.push(porosity);
                area.push(a);
            }
        }
        let brugg: Vec<f64> = eps.iter().map(|e| e.powf(p)).collect();
        let de = cfg.params.electrolyte_diffusivity;
        let diffusion = (0..dx.len() - 1)
            .map(|k| 1.0 / (dx[k] / (2.0 * brugg[k] * de) + dx[k + 1] / (2.0 * brugg[k + 1] * de)))
            .collect();
        let shell = |radius: f64| {
            let dr = radius / nr as f64;
            let volumes = (0..nr)
                .map(|m| (((m + 1) as f64).powi(3) - (m as f64).powi(3)) * dr.powi(3) / 3.0)
                .collect();
            let faces = (1..=nr).map(|m| (m as f64 * dr).powi(2)).collect();
            (volumes, faces, dr)
        };
        Ok(P2d {
            cfg: cfg.clone(),
            np,
            ns,
            nn,
            nr,
            dx,
            eps,
            area,
            diffusion,
            brugg,
            shells: [shell(c.positive.particle_radius), shell(c.negative.particle_radius)],
            newton: NewtonSettings::default(),
            cache: None,
            steps: 0,
        })
    }

    pub fn config(&self) -> &P2dConfig {
        &self.cfg
    }

    pub fn set_newton(&mut self, settings: NewtonSettings) {
        self.newton = settings;
        self.cache = None;
    }

    fn nx(&self) -> usize {
        self.np + self.ns + self.nn
    }

    fn ne(&self) -> usize {
        self.np + self.nn
    }

    pub fn differential_len(&self) -> usize {
        self.ne() * self.nr + self.nx()
    }

    pub fn algebraic_len(&self) -> usize {
        self.ne() + 2 * self.nx()
    }

    /// x index of electrode volume e.
    fn x_of(&self, e: usize) -> usize {
        if e < self.np {
            e
        } else {
            e + self.ns
        }
    }

    fn electrode_of(&self, e: usize) -> Electrode {
        if e < self.np {
            Electrode::Positive
        } else {
            Electrode::Negative
        }
    }

    fn solid(&self, electrode: Electrode) -> (f64, f64, f64, &(Vec<f64>, Vec<f64>, f64)) {
        let c = &self.cfg.cell;
        let p = &self.cfg.params;
        match electrode {
            Electrode::Positive => (
                p.solid_diffusivity_pos,
                p.rate_constant_pos,
                c.positive.max_concentration,
                &self.shells[0],
            ),
            Electrode::Negative => (
                p.solid_diffusivity_neg,
                p.rate_constant_neg,
                c.negative.max_concentration,
                &self.shells[1],
            ),
        }
    }

    fn ocp(&self, electrode: Electrode, theta: f64) -> Result<f64> {
        match electrode {
            Electrode::Positive => ocp_positive(theta, &self.cfg.cell.ocp_positive),
            Electrode::Negative => ocp_negative(theta, &self.cfg.cell.ocp_negative),
        }
    }

    /// Rest state with uniform concentrations, potentials at open circuit
    /// and zero electrolyte potential.
    pub fn equilibrium(&self, cs_pos: f64, cs_neg: f64, ce: f64) -> Result<P2dState> {
        let mut cs = Vec::with_capacity(self.ne() * self.nr);
        let mut phi_s = Vec::with_capacity(self.ne());
        for e in 0..self.ne() {
            let electrode = self.electrode_of(e);
            let (value, cmax) = match electrode {
                Electrode::Positive => (cs_pos, self.cfg.cell.positive.max_concentration),
                Electrode::Negative => (cs_neg, self.cfg.cell.negative.max_concentration),
            };
            cs.extend(std::iter::repeat_n(value, self.nr));
            phi_s.push(self.ocp(electrode, value / cmax)?);
        }
        if !(ce > 0.0) {
            return Err(Error::Domain {
                what: "electrolyte concentration",
                value: ce,
            });
        }
        Ok(P2dState {
            cs,
            ce: vec![ce; self.nx()],
            phi_s,
            phi_e: vec![0.0; self.nx()],
            j: vec![0.0; self.nx()],
            current: 0.0,
        })
    }

    /// Surface concentration of electrode volume e from its outer shell and
    /// the flux boundary condition D ∂c/∂r = −j.
    fn surface(&self, cs: &[f64], j: f64, e: usize) -> f64 {
        let (d, _, _, (_, _, dr)) = self.solid(self.electrode_of(e));
        cs[(e + 1) * self.nr - 1] - j * dr / (2.0 * d)
    }

    /// Stacked residual: time derivatives of the differential fields
    /// followed by the algebraic equations. The first electrolyte potential
    /// row fixes the gauge, φ_e = 0 in the first volume.
    pub fn residual(&self, differential: &[f64], algebraic: &[f64], current: f64) -> Result<Vec<f64>> {
        let ne = self.ne();
        let nx = self.nx();
        let nr = self.nr;
        let c = &self.cfg.cell;
        let params = &self.cfg.params;
        let (cs, ce) = differential.split_at(ne * nr);
        let phi_s = &algebraic[..ne];
        let phi_e = &algebraic[ne..ne + nx];
        let j = &algebraic[ne + nx..];
        if let Some(bad) = ce.iter().chain(cs).find(|v| !(**v > 0.0)) {
            return Err(Error::Domain {
                what: "P2D concentration",
                value: *bad,
            });
        }
        let i_app = current / c.electrode_area;
        let f = c.faraday_constant;
        let t_plus = params.transference;
        let beta = c.beta();

        let mut out = vec![0.0; differential.len() + algebraic.len()];
        let (dcs, rest) = out.split_at_mut(ne * nr);
        let (dce, g) = rest.split_at_mut(nx);

        for e in 0..ne {
            let (d, _, _, (volumes, faces, dr)) = self.solid(self.electrode_of(e));
            let shell = &cs[e * nr..(e + 1) * nr];
            let jx = j[self.x_of(e)];
            for m in 0..nr {
                let inner = if m > 0 {
                    d * faces[m - 1] * (shell[m] - shell[m - 1]) / dr
                } else {
                    0.0
                };
                let outer = if m + 1 < nr {
                    d * faces[m] * (shell[m + 1] - shell[m]) / dr
                } else {
                    -faces[m] * jx
                };
                dcs[e * nr + m] = (outer - inner) / volumes[m];
            }
        }

        for k in 0..nx {
            let mut flux = 0.0;
            if k > 0 {
                flux -= self.diffusion[k - 1] * (ce[k] - ce[k - 1]);
            }
            if k + 1 < nx {
                flux += self.diffusion[k] * (ce[k + 1] - ce[k]);
            }
            dce[k] = (flux + self.area[k] * (1.0 - t_plus) * j[k] * self.dx[k])
                / (self.eps[k] * self.dx[k]);
        }

        // Solid charge balance: i_s(right) − i_s(left) + a F j Δx = 0.
        let (gs, rest) = g.split_at_mut(ne);
        for e in 0..ne {
            let (first, last, sigma) = if e < self.np {
                (0, self.np - 1, self.cfg.solid_conductivity_pos)
            } else {
                (self.np, ne - 1, self.cfg.solid_conductivity_neg)
            };
            let k = self.x_of(e);
            let sigma_eff = self.brugg[k] * sigma;
            let face = |a: usize, b: usize| -sigma_eff * (phi_s[b] - phi_s[a]) / self.dx[k];
            let left = if e == first {
                if e == 0 {
                    -i_app
                } else {
                    0.0
                }
            } else {
                face(e - 1, e)
            };
            let right = if e == last {
                if e == ne - 1 {
                    -i_app
                } else {
                    0.0
                }
            } else {
                face(e, e + 1)
            };
            gs[e] = right - left + self.area[k] * f * j[k] * self.dx[k];
        }

        // Electrolyte charge balance: i_e(right) − i_e(left) − a F j Δx = 0.
        let (ge, gj) = rest.split_at_mut(nx);
        let kappa: Vec<f64> = ce
            .iter()
            .zip(&self.brugg)
            .map(|(v, b)| kappa_electrolyte(*v, &c.kappa_coeffs).map(|k| b * k))
            .collect::<Result<_>>()?;
        let ionic = |k: usize| {
            let conductance = 1.0 / (self.dx[k] / (2.0 * kappa[k]) + self.dx[k + 1] / (2.0 * kappa[k + 1]));
            -conductance
                * ((phi_e[k + 1] - phi_e[k]) - beta * (1.0 - t_plus) * (ce[k + 1] / ce[k]).ln())
        };
        ge[0] = phi_e[0];
        for k in 1..nx {
            let left = ionic(k - 1);
            let right = if k + 1 < nx { ionic(k) } else { 0.0 };
            ge[k] = right - left - self.area[k] * f * j[k] * self.dx[k];
        }

        // Butler–Volmer, and zero flux in the separator.
        let half_f_rt = 0.5 * f / (c.gas_constant * c.temperature);
        for k in 0..nx {
            gj[k] = j[k];
        }
        for e in 0..ne {
            let k = self.x_of(e);
            let electrode = self.electrode_of(e);
            let (_, rate, cmax, _) = self.solid(electrode);
            let surface = self.surface(cs, j[k], e);
            if !(surface > 0.0 && surface < cmax) {
                return Err(Error::Saturation {
                    electrode,
                    value: surface,
                });
            }
            let i0 = rate * (ce[k] * surface * (cmax - surface)).sqrt();
            let eta = phi_s[e] - phi_e[k] - self.ocp(electrode, surface / cmax)?;
            gj[k] = j[k] - 2.0 * i0 * (half_f_rt * eta).sinh();
        }
        Ok(out)
    }

    /// Terminal voltage from the solid potentials extrapolated to the two
    /// collector faces with the applied-current boundary gradient.
    pub fn voltage(&self, state: &P2dState) -> f64 {
        let c = &self.cfg.cell;
        let i_app = state.current / c.electrode_area;
        let first = 0;
        let last = self.nx() - 1;
        let sigma_p = self.brugg[first] * self.cfg.solid_conductivity_pos;
        let sigma_n = self.brugg[last] * self.cfg.solid_conductivity_neg;
        let phi_0 = state.phi_s[0] - 0.5 * self.dx[first] * i_app / sigma_p;
        let phi_l = state.phi_s[self.ne() - 1] + 0.5 * self.dx[last] * i_app / sigma_n;
        phi_0 - phi_l
    }

    /// Σ ε c_e Δx, mol/m^2.
    pub fn electrolyte_inventory(&self, state: &P2dState) -> f64 {
        state
            .ce
            .iter()
            .zip(self.eps.iter().zip(&self.dx))
            .map(|(c, (e, d))| c * e * d)
            .sum()
    }

    /// Lithium in the particle of electrode volume e, divided by 4π.
    pub fn particle_inventory(&self, state: &P2dState, e: usize) -> f64 {
        let (_, _, _, (volumes, _, _)) = self.solid(self.electrode_of(e));
        state.cs[e * self.nr..(e + 1) * self.nr]
            .iter()
            .zip(volumes)
            .map(|(c, v)| c * v)
            .sum()
    }

    /// Volume-averaged cathode solid concentration, mol/m^3.
    pub fn cathode_average(&self, state: &P2dState) -> f64 {
        let (_, _, _, (volumes, _, _)) = &self.solid(Electrode::Positive);
        let total: f64 = volumes.iter().sum();
        (0..self.np)
            .map(|e| self.particle_inventory(state, e) / total)
            .sum::<f64>()
            / self.np as f64
    }

    /// Solid radial-mesh surface and interior values for electrode volume e.
    pub fn particle(&self, state: &P2dState, e: usize) -> Vec<f64> {
        state.cs[e * self.nr..(e + 1) * self.nr].to_vec()
    }

    pub fn separator_range(&self) -> std::ops::Range<usize> {
        self.np..self.np + self.ns
    }

    fn tolerances(&self) -> Vec<f64> {
        let n = &self.newton;
        let mut t = vec![n.atol_concentration; self.differential_len()];
        t.extend(std::iter::repeat_n(n.atol_potential, self.ne() + self.nx()));
        t.extend(std::iter::repeat_n(n.atol_flux, self.nx()));
        t
    }

    /// Solves the algebraic fields for the given concentrations and current,
    /// starting from the fields already in `state`.
    pub fn initialize(&mut self, state: &P2dState, current: f64) -> Result<P2dState> {
        let diff = state.differential();
        let nd = diff.len();
        let atol = self.tolerances()[nd..].to_vec();
        let mut cache = self.cache.take();
        let solve = Solve {
            cache: &mut cache,
            settings: self.newton,
            step: self.steps,
            kind: Kind::Init,
            alpha: 0.0,
        };
        let guess = self.uniform_guess(state, current)?;
        let z = newton_solve(solve, guess, &atol, |alg| {
            let r = self.residual(&diff, alg, current)?;
            Ok(r[nd..].to_vec())
        });
        self.cache = cache;
        let z = z?;
        Ok(self.assemble(&diff, &z, current))
    }

    /// Algebraic start for a new current: reaction spread uniformly over
    /// each electrode and the solid potential set to carry it.
    fn uniform_guess(&self, state: &P2dState, current: f64) -> Result<Vec<f64>> {
        if current == state.current {
            return Ok(state.algebraic());
        }
        let c = &self.cfg.cell;
        let i_app = current / c.electrode_area;
        let mut guess = state.clone();
        for e in 0..self.ne() {
            let k = self.x_of(e);
            let electrode = self.electrode_of(e);
            let (thickness, sign) = match electrode {
                Electrode::Positive => (c.positive.thickness, -1.0),
                Electrode::Negative => (c.negative.thickness, 1.0),
            };
            guess.j[k] = sign * i_app / (c.faraday_constant * self.area[k] * thickness);
            let (_, rate, cmax, _) = self.solid(electrode);
            let surface = self.surface(&state.cs, guess.j[k], e);
            if !(surface > 0.0 && surface < cmax) {
                return Err(Error::Saturation {
                    electrode,
                    value: surface,
                });
            }
            let i0 = rate * (state.ce[k] * surface * (cmax - surface)).sqrt();
            guess.phi_s[e] = state.phi_e[k]
                + self.ocp(electrode, surface / cmax)?
                + c.beta() * (guess.j[k] / (2.0 * i0)).asinh();
        }
        Ok(guess.algebraic())
    }

    fn assemble(&self, differential: &[f64], algebraic: &[f64], current: f64) -> P2dState {
        let split = self.ne() * self.nr;
        let ne = self.ne();
        let nx = self.nx();
        P2dState {
            cs: differential[..split].to_vec(),
            ce: differential[split..].to_vec(),
            phi_s: algebraic[..ne].to_vec(),
            phi_e: algebraic[ne..ne + nx].to_vec(),
            j: algebraic[ne + nx..].to_vec(),
            current,
        }
    }

    /// One implicit Euler step of length dt at constant current.
    pub fn step(&mut self, state: &P2dState, current: f64, dt: f64) -> Result<P2dState> {
        self.bdf(state, None, current, dt)
    }

    /// Constant current over `duration`: one implicit Euler step, then BDF2,
    /// with steps no longer than `max_step`.
    pub fn advance(&mut self, state: &P2dState, current: f64, duration: f64, max_step: f64) -> Result<P2dState> {
        if !(duration > 0.0) || !(max_step > 0.0) {
            return Err(Error::Config(format!(
                "P2D advance needs positive duration and step, got {duration} and {max_step}"
            )));
        }
        let n = (duration / max_step - 1e-9).ceil().max(1.0) as usize;
        let dt = duration / n as f64;
        let mut older: Option<Vec<f64>> = None;
        let mut x = state.clone();
        for _ in 0..n {
            let next = self.bdf(&x, older.as_deref(), current, dt)?;
            older = Some(x.differential());
            x = next;
        }
        Ok(x)
    }

    fn bdf(&mut self, state: &P2dState, older: Option<&[f64]>, current: f64, dt: f64) -> Result<P2dState> {
        let y1 = state.differential();
        let nd = y1.len();
        // (α y − history) / dt = f(y).
        let (alpha, history): (f64, Vec<f64>) = match older {
            None => (1.0, y1.clone()),
            Some(y2) => (1.5, y1.iter().zip(y2).map(|(a, b)| 2.0 * a - 0.5 * b).collect()),
        };
        let z0 = [y1.as_slice(), &self.uniform_guess(state, current)?].concat();
        let atol = self.tolerances();
        self.steps += 1;
        let mut cache = self.cache.take();
        let solve = Solve {
            cache: &mut cache,
            settings: self.newton,
            step: self.steps,
            kind: Kind::Step,
            alpha: alpha / dt,
        };
        let z = newton_solve(solve, z0, &atol, |z| {
            let (diff, alg) = z.split_at(nd);
            let mut r = self.residual(diff, alg, current)?;
            for i in 0..nd {
                r[i] = (alpha * diff[i] - history[i]) / dt - r[i];
            }
            Ok(r)
        });
        self.cache = cache;
        let z = z?;
        Ok(self.assemble(&z[..nd], &z[nd..], current))
    }
}

fn jacobian<F>(z: &[f64], r0: &[f64], system: &F) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = z.len();
    let mut jac = DMatrix::zeros(r0.len(), n);
    let mut trial = z.to_vec();
    for i in 0..n {
        let h = 1e-7 * z[i].abs().max(1e-3) + 1e-12;
        trial[i] = z[i] + h;
        let (r, step) = match system(&trial) {
            Ok(r) => (r, h),
            Err(_) => {
                trial[i] = z[i] - h;
                (system(&trial)?, -h)
            }
        };
        trial[i] = z[i];
        for (row, (a, b)) in r.iter().zip(r0).enumerate() {
            jac[(row, i)] = (a - b) / step;
        }
    }
    Ok(jac)
}

fn factor<F>(kind: Kind, alpha: f64, z: &[f64], r0: &[f64], system: &F) -> Result<Factored>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut jac = jacobian(z, r0, system)?;
    let row_scale: Vec<f64> = (0..jac.nrows())
        .map(|i| {
            let m = jac.row(i).amax();
            if m > 0.0 {
                1.0 / m
            } else {
                1.0
            }
        })
        .collect();
    for (i, s) in row_scale.iter().enumerate() {
        jac.row_mut(i).scale_mut(*s);
    }
    Ok(Factored {
        kind,
        alpha,
        lu: jac.lu(),
        row_scale,
    })
}

struct Solve<'a> {
    cache: &'a mut Option<Factored>,
    settings: NewtonSettings,
    step: usize,
    kind: Kind,
    alpha: f64,
}

fn failure(step: usize, detail: String) -> Error {
    Error::Numerical {
        step,
        detail: format!("P2D Newton: {detail}"),
    }
}

/// Damped modified Newton. The row-equilibrated factorization is reused
/// across calls of the same kind and rebuilt when contraction slows.
fn newton_solve<F>(solve: Solve<'_>, z0: Vec<f64>, atol: &[f64], system: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let Solve {
        cache,
        settings,
        step,
        kind,
        alpha,
    } = solve;
    let mut z = z0;
    let mut r = system(&z)?;
    let stale = match cache.as_ref() {
        Some(c) => c.kind != kind || c.alpha != alpha,
        None => true,
    };
    if stale {
        *cache = Some(factor(kind, alpha, &z, &r, &system)?);
    }
    let mut fresh = stale;
    let mut trace = Vec::new();
    let mut previous_update = f64::INFINITY;
    let mut iteration = 0;
    while iteration < settings.max_iterations {
        iteration += 1;
        let f = cache.as_ref().expect("factored");
        let scaled = DVector::from_iterator(r.len(), r.iter().zip(&f.row_scale).map(|(v, s)| v * s));
        let merit = scaled.amax();
        let Some(dz) = f.lu.solve(&scaled) else {
            if fresh {
                return Err(failure(step, format!("singular Jacobian; merit history {trace:?}")));
            }
            *cache = Some(factor(kind, alpha, &z, &r, &system)?);
            fresh = true;
            continue;
        };
        trace.push(merit);
        // Backtrack until the residual is defined and, with a fresh
        // Jacobian, the scaled residual does not grow.
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<f64> = z.iter().zip(dz.iter()).map(|(a, d)| a - t * d).collect();
            if let Ok(rt) = system(&trial) {
                let m = rt
                    .iter()
                    .zip(&f.row_scale)
                    .fold(0.0f64, |acc, (v, s)| acc.max((v * s).abs()));
                if m <= merit || m < 1e-14 {
                    accepted = Some((trial, rt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((trial, rt)) = accepted else {
            if fresh {
                return Err(failure(step, format!("line search failed; merit history {trace:?}")));
            }
            *cache = Some(factor(kind, alpha, &z, &r, &system)?);
            fresh = true;
            continue;
        };
        let update = z
            .iter()
            .zip(&trial)
            .zip(atol)
            .map(|((a, b), tol)| (a - b).abs() / (tol + settings.rtol * b.abs()))
            .fold(0.0f64, f64::max);
        z = trial;
        r = rt;
        if update <= 1.0 {
            return Ok(z);
        }
        // Rebuild at the new iterate once contraction slows.
        fresh = false;
        if update > 0.25 * previous_update {
            *cache = Some(factor(kind, alpha, &z, &r, &system)?);
            fresh = true;
            previous_update = f64::INFINITY;
            continue;
        }
        previous_update = update;
    }
    Err(failure(
        step,
        format!("no convergence in {} iterations; merit history {trace:?}", settings.max_iterations),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::presets::{identification_cell, true_parameters};
    use crate::model::{Propagator, Spme, IntegratorConfig, StateVector};
    use proptest::prelude::*;

    /// Test conductivities; the shipped example file carries its own.
    fn config(mesh: [usize; 3], shells: usize) -> P2dConfig {
        P2dConfig {
            cell: identification_cell(),
            params: true_parameters(),
            solid_conductivity_pos: 100.0,
            solid_conductivity_neg: 100.0,
            mesh,
            radial_shells: shells,
        }
    }

    fn start(m: &P2d) -> P2dState {
        let cell = &m.config().cell;
        m.equilibrium(
            0.6 * cell.positive.max_concentration,
            0.7 * cell.negative.max_concentration,
            2000.0,
        )
        .unwrap()
    }

    /// State shared with the residual oracle script.
    fn oracle_state(m: &P2d) -> (Vec<f64>, Vec<f64>) {
        let ne = m.ne();
        let nx = m.nx();
        let nr = m.nr;
        let mut cs = Vec::new();
        for e in 0..ne {
            let base = if e < m.np { 30000.0 } else { 20000.0 };
            for r in 0..nr {
                cs.push(base + 150.0 * e as f64 - 40.0 * r as f64);
            }
        }
        let ce: Vec<f64> = (0..nx).map(|k| 1900.0 + 25.0 * k as f64).collect();
        let phi_s: Vec<f64> = (0..ne)
            .map(|e| if e < m.np { 4.0 + 1e-4 * e as f64 } else { 0.1 - 1e-4 * e as f64 })
            .collect();
        let phi_e: Vec<f64> = (0..nx).map(|k| -0.002 * k as f64).collect();
        let j: Vec<f64> = (0..nx)
            .map(|k| {
                if k < m.np {
                    -1e-5 * (1.0 + 0.1 * k as f64)
                } else if k >= m.np + m.ns {
                    2e-5 * (1.0 - 0.05 * k as f64)
                } else {
                    0.0
                }
            })
            .collect();
        ([cs, ce].concat(), [phi_s, phi_e, j].concat())
    }

    #[test]
    fn equilibrium_residual_is_zero() {
        let m = P2d::new(&config([4, 3, 5], 6)).unwrap();
        let s = start(&m);
        let r = m.residual(&s.differential(), &s.algebraic(), 0.0).unwrap();
        assert!(r.iter().all(|v| *v == 0.0), "{r:?}");
    }

    #[test]
    fn separator_flux_is_flagged() {
        let m = P2d::new(&config([4, 3, 5], 6)).unwrap();
        let s = start(&m);
        let mut alg = s.algebraic();
        let offset = m.ne() + m.nx();
        for k in m.separator_range() {
            alg[offset + k] = 1e-6;
        }
        let r = m.residual(&s.differential(), &alg, 0.0).unwrap();
        let nd = m.differential_len();
        for k in m.separator_range() {
            assert_eq!(r[nd + offset + k], 1e-6);
        }
    }

    #[test]
    fn residual_matches_oracle() {
        // Independent assembly of the same discretization (mesh 3/3/3, 3 shells).
        let m = P2d::new(&config([3, 3, 3], 3)).unwrap();
        let (d, a) = oracle_state(&m);
        let r = m.residual(&d, &a, 20.0).unwrap();
        let expected = [
            (0, -8.1),
            (2, 2.1315789473684212),
            (17, -3.6130124982123375),
            (18, 5.0297320417712195),
            (26, -3.272272293642893),
            (27, -80.2816527108121),
            (29, 89.03582926458336),
            (32, -121.31498902323708),
            (33, 0.0),
            (35, 2.3723468405819217),
            (41, -6.286906899294265),
            (42, 0.000158188410355938),
            (45, 0.0),
            (47, 0.0),
            (50, 5.331470454829695e-06),
        ];
        for (i, want) in expected {
            let want: f64 = want;
            let scale = want.abs().max(1e-12);
            assert!((r[i] - want).abs() / scale < 1e-9, "entry {i}: {} vs {want}", r[i]);
        }
        assert_eq!(r.len(), 51);
        let s = m.assemble(&d, &a, 20.0);
        assert!((m.voltage(&s) - 3.900490318294972).abs() < 1e-12, "{}", m.voltage(&s));
    }

    #[test]
    fn voltage_at_equilibrium_is_ocv_difference() {
        let m = P2d::new(&config([4, 3, 5], 6)).unwrap();
        let s = start(&m);
        let cell = &m.config().cell;
        let up = ocp_positive(0.6, &cell.ocp_positive).unwrap();
        let un = ocp_negative(0.7, &cell.ocp_negative).unwrap();
        assert!((m.voltage(&s) - (up - un)).abs() < 1e-12);
    }

    #[test]
    fn rest_step_keeps_equilibrium() {
        let mut m = P2d::new(&config([4, 3, 5], 6)).unwrap();
        let s = start(&m);
        let next = m.step(&s, 0.0, 5.0).unwrap();
        for (a, b) in s.differential().iter().zip(next.differential()) {
            assert!((a - b).abs() < 1e-9 * a.abs());
        }
        assert!((m.voltage(&s) - m.voltage(&next)).abs() < 1e-10);
    }

    #[test]
    fn discharge_conserves_lithium() {
        let mut m = P2d::new(&config([5, 4, 5], 6)).unwrap();
        let mut s = start(&m);
        let i = m.config().cell.one_c_current;
        s = m.initialize(&s, i).unwrap();
        let solid0: f64 = (0..m.ne()).map(|e| m.particle_inventory(&s, e)).sum();
        for _ in 0..20 {
            let before = m.electrolyte_inventory(&s);
            let next = m.step(&s, i, 2.0).unwrap();
            let after = m.electrolyte_inventory(&next);
            assert!(((after - before) / before).abs() < 1e-8, "{before} -> {after}");
            // Each particle changes only through its own surface flux.
            for e in 0..m.ne() {
                let (_, _, _, (_, faces, _)) = m.solid(m.electrode_of(e));
                let change = m.particle_inventory(&next, e) - m.particle_inventory(&s, e);
                let flux = -faces[m.nr - 1] * next.j[m.x_of(e)] * 2.0;
                assert!((change - flux).abs() <= 1e-9 * flux.abs().max(1e-30), "{change} vs {flux}");
            }
            s = next;
        }
        let solid1: f64 = (0..m.ne()).map(|e| m.particle_inventory(&s, e)).sum();
        assert!(solid1 != solid0);
        assert!(m.voltage(&s) < m.voltage(&start(&m)));
    }

    #[test]
    fn gauge_offset_leaves_voltage() {
        let m = P2d::new(&config([4, 3, 5], 6)).unwrap();
        let (d, a) = oracle_state(&m);
        let mut s = m.assemble(&d, &a, 10.0);
        let v = m.voltage(&s);
        for p in s.phi_s.iter_mut().chain(s.phi_e.iter_mut()) {
            *p += 0.37;
        }
        assert!((m.voltage(&s) - v).abs() < 1e-12);
    }

    #[test]
    fn negative_concentration_is_domain_error() {
        let m = P2d::new(&config([4, 3, 5], 6)).unwrap();
        let s = start(&m);
        let mut d = s.differential();
        let last = d.len() - 1;
        d[last] = -1.0;
        assert!(matches!(m.residual(&d, &s.algebraic(), 0.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn coarse_mesh_is_rejected() {
        let e = P2d::new(&config([2, 3, 3], 3)).unwrap_err();
        let Error::Invalid(fields) = e else { panic!("{e}") };
        assert!(fields.iter().any(|f| f.field == "p2d.mesh.cathode"));
    }

    #[test]
    fn low_rate_agrees_with_spme() {
        // C/10 for 1000 s from 60 % stoichiometry, sampled every 10 s.
        let cfg = config([10, 10, 10], 10);
        let mut p2d = P2d::new(&cfg).unwrap();
        let cell = &cfg.cell;
        let i = 0.1 * cell.one_c_current;
        let cp = 0.6 * cell.positive.max_concentration;
        let cn = 0.7 * cell.negative.max_concentration;
        let mut s = p2d.equilibrium(cp, cn, 2000.0).unwrap();
        let spme = Spme::new(cell, &cfg.params).unwrap();
        let prop = Propagator::new(&spme, 10.0, &IntegratorConfig::default()).unwrap();
        let x0 = nalgebra::DVector::from_vec(StateVector::rest(cp, cn, 2000.0, 30).to_vec());
        let v_spme = prop.outputs(&spme, &x0, &[i; 100]).unwrap();
        let mut sq = 0.0;
        for v in &v_spme {
            s = p2d.advance(&s, i, 10.0, 1.0).unwrap();
            sq += (p2d.voltage(&s) - v).powi(2);
        }
        let rms = (sq / 100.0).sqrt();
        assert!(rms < 0.01, "rms {rms}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn initialization_is_consistent(current in -60.0f64..60.0) {
            let mut m = P2d::new(&config([4, 3, 4], 5)).unwrap();
            let s = start(&m);
            let init = m.initialize(&s, current).unwrap();
            let r = m.residual(&init.differential(), &init.algebraic(), current).unwrap();
            let nd = m.differential_len();
            // Solid charge balances sum to the applied current density.
            let total: f64 = (0..m.np).map(|e| m.area[e] * m.dx[e] * init.j[e]).sum();
            let i_app = current / m.config().cell.electrode_area;
            prop_assert!((total * m.config().cell.faraday_constant + i_app).abs() < 1e-8 * i_app.abs().max(1.0));
            prop_assert!(init.j[m.separator_range()].iter().all(|v| *v == 0.0));
            prop_assert!(r[nd..].iter().all(|v| v.abs() < 1e-6));
        }
    }
}

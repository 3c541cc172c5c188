//! Single-particle model with electrolyte and thermal dynamics.
//!
//! Both diffusion equations are discretized with cell-centred finite volumes
//! so that the stored lithium changes only through the prescribed boundary
//! flux (solid) or not at all (electrolyte). Time stepping is linearly
//! implicit Euler for the two diffusion systems and the exact exponential
//! update for the lumped temperature, with the heat source frozen over each
//! inner step.
//!
//! Sign convention: a negative applied current charges the cell.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{CellParameters, Discretization, ElectrodeParameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Electrode {
    Anode,
    Cathode,
}

impl Electrode {
    pub fn name(self) -> &'static str {
        match self {
            Electrode::Anode => "anode",
            Electrode::Cathode => "cathode",
        }
    }
}

/// Full simulator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    /// Shell-averaged concentrations from the particle centre outwards, mol/m³.
    pub c_s_anode: Vec<f64>,
    pub c_s_cathode: Vec<f64>,
    /// Electrolyte cell concentrations from the anode collector to the cathode collector, mol/m³.
    pub c_e: Vec<f64>,
    /// K
    pub t_cell: f64,
    /// Raised once any concentration had to be clipped back into its physical range.
    pub saturated: bool,
}

impl CellState {
    /// State vector in the order anode shells, cathode shells, electrolyte, temperature.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.c_s_anode.len() + self.c_s_cathode.len() + self.c_e.len() + 1);
        v.extend_from_slice(&self.c_s_anode);
        v.extend_from_slice(&self.c_s_cathode);
        v.extend_from_slice(&self.c_e);
        v.push(self.t_cell);
        v
    }

    pub fn len(&self) -> usize {
        self.c_s_anode.len() + self.c_s_cathode.len() + self.c_e.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Terminal voltage split into the terms that make it up. Every field except
/// `v_terminal` is the signed contribution as it enters the sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageBreakdown {
    pub v_terminal: f64,
    pub eta_anode: f64,
    pub eta_cathode: f64,
    /// `U+(css+) - U-(css-)`
    pub ocp_diff: f64,
    pub film_drop: f64,
    pub electrolyte_ohmic: f64,
    pub concentration_polarization: f64,
}

impl VoltageBreakdown {
    pub fn sum_of_terms(&self) -> f64 {
        self.eta_cathode
            + self.eta_anode
            + self.ocp_diff
            + self.film_drop
            + self.electrolyte_ohmic
            + self.concentration_polarization
    }
}

/// Factored tridiagonal matrix, Thomas algorithm.
#[derive(Debug, Clone)]
struct Tridiagonal {
    lower: Vec<f64>,
    upper_mod: Vec<f64>,
    denom: Vec<f64>,
}

impl Tridiagonal {
    /// `lower[i]` couples row i to i-1 (lower[0] unused), `upper[i]` couples i to i+1.
    fn factor(lower: Vec<f64>, diag: &[f64], upper: &[f64]) -> Self {
        let n = diag.len();
        let mut upper_mod = vec![0.0; n];
        let mut denom = vec![0.0; n];
        denom[0] = diag[0];
        upper_mod[0] = upper[0] / denom[0];
        for i in 1..n {
            denom[i] = diag[i] - lower[i] * upper_mod[i - 1];
            upper_mod[i] = upper[i] / denom[i];
        }
        Self {
            lower,
            upper_mod,
            denom,
        }
    }

    fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        rhs[0] /= self.denom[0];
        for i in 1..n {
            rhs[i] = (rhs[i] - self.lower[i] * rhs[i - 1]) / self.denom[i];
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= self.upper_mod[i] * rhs[i + 1];
        }
    }
}

/// Finite-volume conductance matrix `K` plus mass vector: the system is
/// `mass dc/dt = -K c + source`.
fn implicit_system(mass: &[f64], conductance: &[f64], dt: f64) -> Tridiagonal {
    let n = mass.len();
    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut diag: Vec<f64> = mass.iter().map(|m| m / dt).collect();
    for (k, &g) in conductance.iter().enumerate() {
        diag[k] += g;
        diag[k + 1] += g;
        upper[k] = -g;
        lower[k + 1] = -g;
    }
    Tridiagonal::factor(lower, &diag, &upper)
}

/// Radial grid of one electrode particle.
#[derive(Debug, Clone)]
pub struct ParticleGrid {
    pub radius: f64,
    pub c_max: f64,
    pub diffusivity: f64,
    pub dr: f64,
    pub shell_volumes: Vec<f64>,
    /// Areas of the interior shell interfaces, one fewer than shells.
    pub interface_areas: Vec<f64>,
    pub surface_area: f64,
    /// Outward molar flux density at the particle surface per ampere of applied current.
    pub flux_per_amp: f64,
    total_volume: f64,
    system: Tridiagonal,
}

impl ParticleGrid {
    fn new(e: &ElectrodeParameters, shells: usize, flux_per_amp: f64, dt: f64) -> Self {
        let radius = e.particle_radius;
        let dr = radius / shells as f64;
        let face = |i: usize| if i == shells { radius } else { i as f64 * dr };
        let shell_volumes: Vec<f64> = (0..shells)
            .map(|i| 4.0 / 3.0 * PI * (face(i + 1).powi(3) - face(i).powi(3)))
            .collect();
        let interface_areas: Vec<f64> = (1..shells).map(|i| 4.0 * PI * face(i).powi(2)).collect();
        let conductance: Vec<f64> = interface_areas.iter().map(|a| e.diffusivity * a / dr).collect();
        let system = implicit_system(&shell_volumes, &conductance, dt);
        Self {
            radius,
            c_max: e.max_concentration,
            diffusivity: e.diffusivity,
            dr,
            total_volume: shell_volumes.iter().sum(),
            shell_volumes,
            interface_areas,
            surface_area: 4.0 * PI * radius * radius,
            flux_per_amp,
            system,
        }
    }

    pub fn total_volume(&self) -> f64 {
        self.total_volume
    }

    /// Lithium held by one particle, mol.
    pub fn lithium(&self, c: &[f64]) -> f64 {
        self.shell_volumes.iter().zip(c).map(|(v, c)| v * c).sum()
    }

    pub fn bulk_stoich(&self, c: &[f64]) -> f64 {
        self.lithium(c) / (self.total_volume * self.c_max)
    }

    /// Surface concentration extrapolated from the outer shell with the known boundary gradient.
    pub fn surface_concentration(&self, c: &[f64], current: f64) -> f64 {
        let flux = self.flux_per_amp * current;
        c[c.len() - 1] - flux * 0.5 * self.dr / self.diffusivity
    }

    fn advance(&self, c: &mut [f64], current: f64, dt: f64) {
        for (ci, v) in c.iter_mut().zip(&self.shell_volumes) {
            *ci *= v / dt;
        }
        let last = c.len() - 1;
        c[last] -= self.flux_per_amp * current * self.surface_area;
        self.system.solve_in_place(c);
    }
}

/// Through-cell electrolyte grid, anode collector at x = 0.
#[derive(Debug, Clone)]
pub struct ElectrolyteGrid {
    pub widths: Vec<f64>,
    pub porosity: Vec<f64>,
    /// Effective diffusive conductance between neighbouring cells, m/s.
    pub conductance: Vec<f64>,
    /// Electrolyte current density at the cell faces per ampere applied,
    /// piecewise linear: 0 at both collectors, `1/A` across the separator.
    pub face_current_per_amp: Vec<f64>,
    /// Molar source per unit plate area per ampere applied, mol/(m² s A).
    pub source_per_amp: Vec<f64>,
    pub n_anode: usize,
    pub n_cathode: usize,
    system: Tridiagonal,
}

impl ElectrolyteGrid {
    fn new(p: &CellParameters, disc: &Discretization, dt: f64) -> Self {
        let regions = [
            (disc.n_x_anode, p.anode.thickness, p.anode.electrolyte_fraction),
            (disc.n_x_separator, p.separator.thickness, p.separator.electrolyte_fraction),
            (disc.n_x_cathode, p.cathode.thickness, p.cathode.electrolyte_fraction),
        ];
        let mut widths = Vec::new();
        let mut porosity = Vec::new();
        let mut diff = Vec::new();
        for &(n, l, eps) in &regions {
            for _ in 0..n {
                widths.push(l / n as f64);
                porosity.push(eps);
                diff.push(p.electrolyte.diffusivity * eps.powf(p.electrolyte.bruggeman));
            }
        }
        let conductance: Vec<f64> = (0..widths.len() - 1)
            .map(|k| 1.0 / (0.5 * widths[k] / diff[k] + 0.5 * widths[k + 1] / diff[k + 1]))
            .collect();

        let area = p.plate_area;
        let mut face_current_per_amp = vec![0.0];
        for i in 1..=disc.n_x_anode {
            face_current_per_amp.push(i as f64 / disc.n_x_anode as f64 / area);
        }
        for _ in 0..disc.n_x_separator {
            face_current_per_amp.push(1.0 / area);
        }
        for i in 1..=disc.n_x_cathode {
            let remaining = (disc.n_x_cathode - i) as f64 / disc.n_x_cathode as f64;
            face_current_per_amp.push(remaining / area);
        }
        let gain = (1.0 - p.electrolyte.transference) / p.faraday;
        let source_per_amp = face_current_per_amp
            .windows(2)
            .map(|w| gain * (w[1] - w[0]))
            .collect();

        let mass: Vec<f64> = widths.iter().zip(&porosity).map(|(w, e)| w * e).collect();
        let system = implicit_system(&mass, &conductance, dt);
        Self {
            widths,
            porosity,
            conductance,
            face_current_per_amp,
            source_per_amp,
            n_anode: disc.n_x_anode,
            n_cathode: disc.n_x_cathode,
            system,
        }
    }

    /// Lithium per unit plate area, mol/m².
    pub fn lithium_per_area(&self, c: &[f64]) -> f64 {
        self.widths
            .iter()
            .zip(&self.porosity)
            .zip(c)
            .map(|((w, e), c)| w * e * c)
            .sum()
    }

    fn anode_mean(&self, c: &[f64]) -> f64 {
        c[..self.n_anode].iter().sum::<f64>() / self.n_anode as f64
    }

    fn cathode_mean(&self, c: &[f64]) -> f64 {
        c[c.len() - self.n_cathode..].iter().sum::<f64>() / self.n_cathode as f64
    }

    fn advance(&self, c: &mut [f64], current: f64, dt: f64) {
        for (k, ck) in c.iter_mut().enumerate() {
            *ck = *ck * self.widths[k] * self.porosity[k] / dt + self.source_per_amp[k] * current;
        }
        self.system.solve_in_place(c);
    }
}

/// Precomputed grids and constants for one cell and one discretization.
/// Immutable once built.
#[derive(Debug, Clone)]
pub struct SimulatorContext {
    params: CellParameters,
    disc: Discretization,
    pub anode: ParticleGrid,
    pub cathode: ParticleGrid,
    pub electrolyte: ElectrolyteGrid,
    heat_scale: f64,
    capacity_ah: f64,
}

impl SimulatorContext {
    pub fn new(params: &CellParameters, disc: &Discretization) -> Result<Self> {
        params.validate()?;
        disc.validate()?;
        let p = params;
        let area = p.plate_area;
        let f = p.faraday;
        let anode_flux = 1.0 / (p.anode.specific_area * f * area * p.anode.thickness);
        let cathode_flux = -1.0 / (p.cathode.specific_area * f * area * p.cathode.thickness);
        Ok(Self {
            anode: ParticleGrid::new(&p.anode, disc.n_r_anode, anode_flux, disc.dt_sim),
            cathode: ParticleGrid::new(&p.cathode, disc.n_r_cathode, cathode_flux, disc.dt_sim),
            electrolyte: ElectrolyteGrid::new(p, disc, disc.dt_sim),
            params: params.clone(),
            disc: *disc,
            heat_scale: 1.0,
            capacity_ah: p.nominal_capacity_ah(),
        })
    }

    /// Multiplies the generated heat before it enters the thermal balance.
    pub fn with_heat_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::param("heat_scale", format!("must be finite and positive, got {scale}")));
        }
        self.heat_scale = scale;
        Ok(self)
    }

    pub fn params(&self) -> &CellParameters {
        &self.params
    }

    pub fn discretization(&self) -> &Discretization {
        &self.disc
    }

    pub fn heat_scale(&self) -> f64 {
        self.heat_scale
    }

    pub fn capacity_ah(&self) -> f64 {
        self.capacity_ah
    }

    pub fn state_count(&self) -> usize {
        self.disc.state_count()
    }

    pub fn grid(&self, electrode: Electrode) -> &ParticleGrid {
        match electrode {
            Electrode::Anode => &self.anode,
            Electrode::Cathode => &self.cathode,
        }
    }

    /// Cell at rest: uniform particles balanced at `soc_anode`, uniform
    /// electrolyte, temperature `t_cell` in K.
    pub fn equilibrium_state(&self, soc_anode: f64, t_cell: f64) -> Result<CellState> {
        let p = &self.params;
        let theta_c = p.balanced_cathode_stoich(soc_anode);
        for (name, theta, table) in [
            ("anode", soc_anode, &p.anode.ocp),
            ("cathode", theta_c, &p.cathode.ocp),
        ] {
            let (lo, hi) = table.range();
            if !(theta > 0.0 && theta < 1.0 && theta >= lo && theta <= hi) {
                return Err(Error::InvalidConfig(format!(
                    "{name} stoichiometry {theta:.4} for anode SOC {soc_anode} is outside the OCP table"
                )));
            }
        }
        if !(t_cell.is_finite() && t_cell > 0.0) {
            return Err(Error::param("t_cell", format!("must be positive, got {t_cell}")));
        }
        Ok(CellState {
            c_s_anode: vec![soc_anode * self.anode.c_max; self.disc.n_r_anode],
            c_s_cathode: vec![theta_c * self.cathode.c_max; self.disc.n_r_cathode],
            c_e: vec![p.electrolyte.initial_concentration; self.disc.electrolyte_nodes()],
            t_cell,
            saturated: false,
        })
    }

    pub fn bulk_soc(&self, state: &CellState, electrode: Electrode) -> f64 {
        match electrode {
            Electrode::Anode => self.anode.bulk_stoich(&state.c_s_anode),
            Electrode::Cathode => self.cathode.bulk_stoich(&state.c_s_cathode),
        }
    }

    /// `U+(SOC_p) - U-(SOC_n)` at bulk stoichiometries.
    pub fn bulk_ocv(&self, state: &CellState) -> f64 {
        self.params.cathode.ocp.eval(self.bulk_soc(state, Electrode::Cathode))
            - self.params.anode.ocp.eval(self.bulk_soc(state, Electrode::Anode))
    }

    pub fn electrolyte_lithium(&self, state: &CellState) -> f64 {
        self.electrolyte.lithium_per_area(&state.c_e) * self.params.plate_area
    }

    pub fn exchange_current(&self, electrode: Electrode, c_e_avg: f64, c_ss: f64) -> f64 {
        let (e, grid) = match electrode {
            Electrode::Anode => (&self.params.anode, &self.anode),
            Electrode::Cathode => (&self.params.cathode, &self.cathode),
        };
        let alpha = self.params.symmetry_factor;
        e.rate_constant * (c_e_avg * c_ss * (grid.c_max - c_ss)).powf(alpha)
    }

    /// Kinetic overpotential `(R T / alpha F) asinh(I / (2 a A L i0))` for a
    /// signed electrode current.
    pub fn kinetic_term(&self, electrode: Electrode, current: f64, i0: f64, t_cell: f64) -> f64 {
        let p = &self.params;
        let e = match electrode {
            Electrode::Anode => &p.anode,
            Electrode::Cathode => &p.cathode,
        };
        let prefactor = p.gas_constant * t_cell / (p.symmetry_factor * p.faraday);
        prefactor * (current / (2.0 * e.specific_area * p.plate_area * e.thickness * i0)).asinh()
    }

    pub fn terminal_voltage(&self, state: &CellState, current: f64) -> Result<VoltageBreakdown> {
        self.voltage_terms(state, current, false)
    }

    fn voltage_terms(&self, state: &CellState, current: f64, clamp: bool) -> Result<VoltageBreakdown> {
        let p = &self.params;
        let mut css_a = self.anode.surface_concentration(&state.c_s_anode, current);
        let mut css_c = self.cathode.surface_concentration(&state.c_s_cathode, current);
        for (electrode, css, c_max) in [
            (Electrode::Anode, &mut css_a, self.anode.c_max),
            (Electrode::Cathode, &mut css_c, self.cathode.c_max),
        ] {
            if !(*css > 0.0 && *css < c_max) {
                if clamp {
                    *css = css.clamp(1e-9 * c_max, (1.0 - 1e-9) * c_max);
                } else {
                    return Err(Error::SurfaceSaturated {
                        electrode: electrode.name(),
                        value: *css,
                        c_max,
                    });
                }
            }
        }
        let c_e = &state.c_e;
        let (mut ce_left, mut ce_right) = (c_e[0], c_e[c_e.len() - 1]);
        for ce in [&mut ce_left, &mut ce_right] {
            if *ce <= 0.0 {
                if clamp {
                    *ce = 1e-9 * p.electrolyte.initial_concentration;
                } else {
                    return Err(Error::ElectrolyteDepleted(*ce));
                }
            }
        }
        let t = state.t_cell;
        let ce_anode = self.electrolyte.anode_mean(c_e).max(f64::MIN_POSITIVE);
        let ce_cathode = self.electrolyte.cathode_mean(c_e).max(f64::MIN_POSITIVE);

        let i0_c = self.exchange_current(Electrode::Cathode, ce_cathode, css_c);
        let i0_a = self.exchange_current(Electrode::Anode, ce_anode, css_a);
        let eta_cathode = self.kinetic_term(Electrode::Cathode, -current, i0_c, t);
        let eta_anode = -self.kinetic_term(Electrode::Anode, current, i0_a, t);
        let ocp_diff = p.cathode.ocp.eval(css_c / self.cathode.c_max) - p.anode.ocp.eval(css_a / self.anode.c_max);
        let film = p.cathode.film_resistance / (p.cathode.specific_area * p.plate_area * p.cathode.thickness)
            + p.anode.film_resistance / (p.anode.specific_area * p.plate_area * p.anode.thickness);
        let film_drop = -film * current;
        let ohmic = (p.cathode.thickness + 2.0 * p.separator.thickness + p.anode.thickness)
            / (2.0 * p.plate_area * p.electrolyte.conductivity);
        let electrolyte_ohmic = -ohmic * current;
        let k_conc = 2.0 * p.gas_constant * t / p.faraday
            * (1.0 - p.electrolyte.transference)
            * p.electrolyte.activity_factor;
        let concentration_polarization = k_conc * (ce_right.ln() - ce_left.ln());

        let mut v = VoltageBreakdown {
            v_terminal: 0.0,
            eta_anode,
            eta_cathode,
            ocp_diff,
            film_drop,
            electrolyte_ohmic,
            concentration_polarization,
        };
        v.v_terminal = v.sum_of_terms();
        Ok(v)
    }

    /// Heat generated by the cell, `I ((U+(SOC_p) - U-(SOC_n)) - V_T)`, W.
    pub fn heat_rate(&self, state: &CellState, current: f64, v: &VoltageBreakdown) -> f64 {
        heat_rate(current, self.bulk_ocv(state), v.v_terminal)
    }

    /// Advances the cell by `dt_ctrl` seconds at constant `current`.
    pub fn step(&self, state: &CellState, current: f64, dt_ctrl: f64) -> Result<CellState> {
        if !current.is_finite() {
            return Err(Error::NonFinite("applied current"));
        }
        let n_inner = self.inner_steps(dt_ctrl)?;
        let mut s = state.clone();
        for _ in 0..n_inner {
            self.inner_step(&mut s, current);
        }
        Ok(s)
    }

    pub fn inner_steps(&self, dt_ctrl: f64) -> Result<usize> {
        let dt = self.disc.dt_sim;
        let ratio = dt_ctrl / dt;
        let n = ratio.round();
        if !(dt_ctrl > 0.0 && n >= 1.0 && (ratio - n).abs() <= 1e-9 * ratio.max(1.0)) {
            return Err(Error::StepNotMultiple { dt_ctrl, dt_sim: dt });
        }
        Ok(n as usize)
    }

    fn inner_step(&self, s: &mut CellState, current: f64) {
        let dt = self.disc.dt_sim;
        let v = match self.voltage_terms(s, current, false) {
            Ok(v) => Some(v),
            Err(_) => {
                s.saturated = true;
                self.voltage_terms(s, current, true).ok()
            }
        };
        let heat = v.map_or(0.0, |v| self.heat_scale * self.heat_rate(s, current, &v));

        self.anode.advance(&mut s.c_s_anode, current, dt);
        self.cathode.advance(&mut s.c_s_cathode, current, dt);
        self.electrolyte.advance(&mut s.c_e, current, dt);

        let th = &self.params.thermal;
        let steady = th.ambient_temperature + heat * th.thermal_resistance;
        s.t_cell = steady + (s.t_cell - steady) * (-dt / th.time_constant()).exp();

        for (c, c_max) in [
            (&mut s.c_s_anode, self.anode.c_max),
            (&mut s.c_s_cathode, self.cathode.c_max),
        ] {
            for ci in c.iter_mut() {
                if *ci < 0.0 || *ci > c_max {
                    *ci = ci.clamp(0.0, c_max);
                    s.saturated = true;
                }
            }
        }
        let floor = 1e-9 * self.params.electrolyte.initial_concentration;
        for ce in s.c_e.iter_mut() {
            if *ce <= 0.0 {
                *ce = floor;
                s.saturated = true;
            }
        }
    }
}

/// `I (OCV - V_T)` with negative current charging; positive when the cell is
/// driven away from equilibrium in either direction.
pub fn heat_rate(current: f64, ocv: f64, v_terminal: f64) -> f64 {
    current * (ocv - v_terminal)
}

/// One recorded simulator sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub time_s: f64,
    pub current_a: f64,
    pub voltage: VoltageBreakdown,
    pub t_cell_k: f64,
    pub soc_anode: f64,
}

impl TrajectoryPoint {
    pub const CSV_HEADER: [&'static str; 11] = [
        "time_s",
        "current_A",
        "v_terminal_V",
        "t_cell_K",
        "soc_anode",
        "eta_anode_V",
        "eta_cathode_V",
        "ocp_diff_V",
        "film_drop_V",
        "electrolyte_ohmic_V",
        "concentration_polarization_V",
    ];

    pub fn csv_fields(&self) -> [String; 11] {
        let v = &self.voltage;
        [
            self.time_s,
            self.current_a,
            v.v_terminal,
            self.t_cell_k,
            self.soc_anode,
            v.eta_anode,
            v.eta_cathode,
            v.ocp_diff,
            v.film_drop,
            v.electrolyte_ohmic,
            v.concentration_polarization,
        ]
        .map(|x| x.to_string())
    }
}

pub fn write_trajectory_csv<W: Write>(out: W, points: &[TrajectoryPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::parse("trajectory csv", e);
    w.write_record(TrajectoryPoint::CSV_HEADER).map_err(err)?;
    for p in points {
        w.write_record(p.csv_fields()).map_err(err)?;
    }
    w.flush().map_err(|e| Error::parse("trajectory csv", e))?;
    Ok(())
}

/// Piecewise-constant current: each segment holds `current_a` for `duration_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentProfile {
    pub segments: Vec<(f64, f64)>,
}

impl CurrentProfile {
    pub fn constant(current_a: f64, duration_s: f64, segment_s: f64) -> Self {
        let n = (duration_s / segment_s).round() as usize;
        Self {
            segments: vec![(segment_s, current_a); n],
        }
    }

    /// Reads `time_s,current_A` rows: each current holds until the next row's
    /// time; the last row only marks the end time. A header row is allowed.
    pub fn from_csv_str(text: &str, context: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows: Vec<(f64, f64)> = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::parse(context, e))?;
            if record.len() < 2 {
                return Err(Error::parse(context, format!("row {}: expected time_s,current_A", i + 1)));
            }
            let (t, c) = (record[0].parse::<f64>(), record[1].parse::<f64>());
            match (t, c) {
                (Ok(t), Ok(c)) if t.is_finite() && c.is_finite() => rows.push((t, c)),
                _ if i == 0 => continue,
                _ => return Err(Error::parse(context, format!("row {}: not numeric", i + 1))),
            }
        }
        if rows.len() < 2 {
            return Err(Error::parse(context, "profile needs at least two rows"));
        }
        let mut segments = Vec::with_capacity(rows.len() - 1);
        for w in rows.windows(2) {
            let duration = w[1].0 - w[0].0;
            if duration <= 0.0 {
                return Err(Error::parse(context, "times must be strictly increasing"));
            }
            segments.push((duration, w[0].1));
        }
        Ok(Self { segments })
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.0).sum()
    }
}

/// Open-loop run, recording the initial point and the end of every segment.
pub fn simulate_profile(
    ctx: &SimulatorContext,
    initial: &CellState,
    profile: &CurrentProfile,
) -> Result<(Vec<TrajectoryPoint>, CellState)> {
    let mut state = initial.clone();
    let mut time = 0.0;
    let mut points = vec![sample(ctx, &state, 0.0, 0.0)?];
    for &(duration, current) in &profile.segments {
        state = ctx.step(&state, current, duration)?;
        time += duration;
        points.push(sample(ctx, &state, time, current)?);
    }
    Ok((points, state))
}

pub fn sample(ctx: &SimulatorContext, state: &CellState, time_s: f64, current_a: f64) -> Result<TrajectoryPoint> {
    Ok(TrajectoryPoint {
        time_s,
        current_a,
        voltage: ctx.voltage_terms(state, current_a, true)?,
        t_cell_k: state.t_cell,
        soc_anode: ctx.bulk_soc(state, Electrode::Anode),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> SimulatorContext {
        SimulatorContext::new(&CellParameters::default_graphite_nmc(), &Discretization::default()).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn default_grid_state_count() {
        let c = ctx();
        let s = c.equilibrium_state(0.3, 300.15).unwrap();
        assert_eq!(s.len(), 61);
        assert_eq!(s.to_vec().len(), 61);
    }

    #[test]
    fn shell_volumes_partition_sphere() {
        let c = ctx();
        for g in [&c.anode, &c.cathode] {
            let sphere = 4.0 / 3.0 * PI * g.radius.powi(3);
            let sum: f64 = g.shell_volumes.iter().sum();
            assert!(rel(sum, sphere) < 1e-12);
        }
    }

    #[test]
    fn electrolyte_sources_cancel() {
        let c = ctx();
        let total: f64 = c.electrolyte.source_per_amp.iter().sum();
        let scale: f64 = c.electrolyte.source_per_amp.iter().map(|s| s.abs()).sum();
        assert!(total.abs() < 1e-15 * scale);
        assert_eq!(c.electrolyte.face_current_per_amp.first(), Some(&0.0));
        assert_eq!(c.electrolyte.face_current_per_amp.last(), Some(&0.0));
    }

    #[test]
    fn rest_state_is_fixed_point() {
        let c = ctx();
        let t_amb = c.params().thermal.ambient_temperature;
        let s0 = c.equilibrium_state(0.5, t_amb).unwrap();
        let s1 = c.step(&s0, 0.0, 600.0).unwrap();
        for (a, b) in s0.to_vec().iter().zip(s1.to_vec()) {
            assert!(rel(b, *a) < 1e-10, "{a} vs {b}");
        }
        assert!(!s1.saturated);
    }

    #[test]
    fn thermal_relaxation_is_exponential() {
        let c = ctx();
        let th = c.params().thermal.clone();
        let mut s = c.equilibrium_state(0.5, th.ambient_temperature + 10.0).unwrap();
        let tau = th.time_constant();
        for k in 1..=20 {
            s = c.step(&s, 0.0, 60.0).unwrap();
            let expected = 10.0 * (-(k as f64 * 60.0) / tau).exp();
            assert!(rel(s.t_cell - th.ambient_temperature, expected) < 1e-9);
        }
    }

    #[test]
    fn one_c_for_36_seconds_moves_soc_by_a_hundredth() {
        let c = ctx();
        let s0 = c.equilibrium_state(0.3, 300.15).unwrap();
        assert!((c.bulk_soc(&s0, Electrode::Anode) - 0.3).abs() < 1e-15);
        let s1 = c.step(&s0, -c.capacity_ah(), 36.0).unwrap();
        assert!((c.bulk_soc(&s1, Electrode::Anode) - 0.31).abs() < 1e-6);
    }

    #[test]
    fn step_rejects_fractional_multiple() {
        let c = ctx();
        let s0 = c.equilibrium_state(0.3, 300.15).unwrap();
        assert!(matches!(c.step(&s0, -1.0, 1.5), Err(Error::StepNotMultiple { .. })));
        assert!(matches!(c.step(&s0, -1.0, 0.0), Err(Error::StepNotMultiple { .. })));
    }

    #[test]
    fn bulk_soc_of_uniform_profiles() {
        let c = ctx();
        let mut s = c.equilibrium_state(0.3, 300.15).unwrap();
        s.c_s_anode.iter_mut().for_each(|v| *v = 0.5 * c.anode.c_max);
        assert!((c.bulk_soc(&s, Electrode::Anode) - 0.5).abs() < 1e-15);
        s.c_s_anode.iter_mut().for_each(|v| *v = c.anode.c_max);
        assert!((c.bulk_soc(&s, Electrode::Anode) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rest_voltage_is_ocp_difference() {
        let c = ctx();
        let s = c.equilibrium_state(0.4, 300.15).unwrap();
        let v = c.terminal_voltage(&s, 0.0).unwrap();
        let p = c.params();
        let expected = p.cathode.ocp.eval(s.c_s_cathode[0] / c.cathode.c_max)
            - p.anode.ocp.eval(s.c_s_anode[0] / c.anode.c_max);
        assert_eq!(v.v_terminal, expected);
        assert_eq!(v.ocp_diff, expected);
    }

    #[test]
    fn charging_raises_voltage_above_ocp() {
        let c = ctx();
        let s = c.equilibrium_state(0.4, 300.15).unwrap();
        let v = c.terminal_voltage(&s, -5.0).unwrap();
        assert!(v.v_terminal > v.ocp_diff);
        assert!(v.eta_anode > 0.0 && v.eta_cathode > 0.0);
        assert!(v.film_drop > 0.0 && v.electrolyte_ohmic > 0.0);
        assert!((v.v_terminal - v.sum_of_terms()).abs() <= 1e-12);
    }

    #[test]
    fn kinetic_term_matches_direct_evaluation() {
        let c = ctx();
        let p = c.params();
        let (current, i0, t) = (-4.2, 1.7, 305.0);
        let direct = 8.314462618 * 305.0 / (0.5 * 96485.33212)
            * (-4.2_f64 / (2.0 * 3.17e5 * 0.2 * 55.0e-6 * 1.7)).asinh();
        assert_eq!(p.anode.specific_area, 3.17e5);
        let got = c.kinetic_term(Electrode::Anode, current, i0, t);
        assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn saturated_surface_is_an_error() {
        let c = ctx();
        let mut s = c.equilibrium_state(0.4, 300.15).unwrap();
        let last = s.c_s_anode.len() - 1;
        s.c_s_anode[last] = c.anode.c_max;
        assert!(matches!(
            c.terminal_voltage(&s, 0.0),
            Err(Error::SurfaceSaturated { electrode: "anode", .. })
        ));
        let mut s = c.equilibrium_state(0.4, 300.15).unwrap();
        s.c_e[0] = 0.0;
        assert!(matches!(c.terminal_voltage(&s, 0.0), Err(Error::ElectrolyteDepleted(_))));
    }

    #[test]
    fn heat_rate_arithmetic() {
        assert_eq!(heat_rate(0.0, 3.8, 4.0), 0.0);
        assert!((heat_rate(-5.0, 3.8, 4.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overcharge_saturates_and_flags() {
        let c = ctx();
        let s0 = c.equilibrium_state(0.9, 300.15).unwrap();
        let s1 = c.step(&s0, -5.0 * c.capacity_ah(), 3600.0).unwrap();
        assert!(s1.saturated);
        assert!(s1.c_s_anode.iter().all(|&v| v <= c.anode.c_max && v >= 0.0));
    }

    #[test]
    fn profile_csv_parsing() {
        let p = CurrentProfile::from_csv_str("time_s,current_A\n0,-1\n10,0\n25,2\n", "p").unwrap();
        assert_eq!(p.segments, vec![(10.0, -1.0), (15.0, 0.0)]);
        assert!(CurrentProfile::from_csv_str("0,-1\n0,2\n", "p").is_err());
        assert!(CurrentProfile::from_csv_str("0,-1\nx,2\n", "p").is_err());
    }
}

//! Cell parameters, open-circuit-potential tables and grid settings.
//!
//! Parameter files are TOML with SI units throughout. Open-circuit potentials
//! live in separate two-column text files (stoichiometry, volts) referenced by
//! path relative to the parameter file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_CELL_TOML: &str = include_str!("../data/default_cell.toml");
const DEFAULT_ANODE_OCP: &str = include_str!("../data/graphite_ocp.csv");
const DEFAULT_CATHODE_OCP: &str = include_str!("../data/nmc_ocp.csv");

/// Piecewise-linear open-circuit potential as a function of stoichiometry.
///
/// Queries outside the tabulated range clamp to the end points.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OcpTable {
    stoichiometry: Vec<f64>,
    potential: Vec<f64>,
}

impl OcpTable {
    pub const MIN_POINTS: usize = 4;

    pub fn new(stoichiometry: Vec<f64>, potential: Vec<f64>) -> Result<Self> {
        if stoichiometry.len() != potential.len() {
            return Err(Error::DimensionMismatch {
                expected: stoichiometry.len(),
                actual: potential.len(),
            });
        }
        if stoichiometry.len() < Self::MIN_POINTS {
            return Err(Error::param(
                "ocp_table",
                format!("needs at least {} points, got {}", Self::MIN_POINTS, stoichiometry.len()),
            ));
        }
        if stoichiometry.iter().chain(&potential).any(|v| !v.is_finite()) {
            return Err(Error::param("ocp_table", "non-finite entry"));
        }
        if stoichiometry.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("ocp_table", "stoichiometry must be strictly increasing"));
        }
        if stoichiometry[0] < 0.0 || stoichiometry[stoichiometry.len() - 1] > 1.0 {
            return Err(Error::param("ocp_table", "stoichiometry must lie in [0, 1]"));
        }
        Ok(Self {
            stoichiometry,
            potential,
        })
    }

    /// Parses `stoichiometry,volts` rows. Blank lines and `#` comments are skipped.
    pub fn from_csv_str(text: &str, context: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::parse(context, e))?;
            if record.len() != 2 {
                return Err(Error::parse(
                    context,
                    format!("row {}: expected 2 columns, got {}", line + 1, record.len()),
                ));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::parse(context, format!("row {}: {e}", line + 1)))
            };
            xs.push(parse(&record[0])?);
            ys.push(parse(&record[1])?);
        }
        Self::new(xs, ys)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text, &path.display().to_string())
    }

    pub fn eval(&self, x: f64) -> f64 {
        let xs = &self.stoichiometry;
        let ys = &self.potential;
        let last = xs.len() - 1;
        if x <= xs[0] {
            return ys[0];
        }
        if x >= xs[last] {
            return ys[last];
        }
        // first index with xs[i] > x; 1 <= hi <= last here
        let hi = xs.partition_point(|&v| v <= x);
        let lo = hi - 1;
        let w = (x - xs[lo]) / (xs[hi] - xs[lo]);
        ys[lo] + w * (ys[hi] - ys[lo])
    }

    pub fn len(&self) -> usize {
        self.stoichiometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stoichiometry.is_empty()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.stoichiometry[0], self.stoichiometry[self.stoichiometry.len() - 1])
    }
}

/// One porous electrode with its representative spherical particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeParameters {
    /// Solid-phase diffusivity, m²/s.
    pub diffusivity: f64,
    /// Particle radius, m.
    pub particle_radius: f64,
    /// Maximum solid concentration, mol/m³.
    pub max_concentration: f64,
    /// Specific interfacial area, 1/m.
    pub specific_area: f64,
    /// Electrode thickness, m.
    pub thickness: f64,
    /// Electrolyte volume fraction.
    pub electrolyte_fraction: f64,
    /// Film resistance, Ω·m².
    pub film_resistance: f64,
    /// Reaction rate constant in `i0 = k (c_e c_ss (c_max - c_ss))^alpha`.
    pub rate_constant: f64,
    /// Path of the open-circuit-potential table, relative to the parameter file.
    pub ocp_table: String,
    #[serde(skip)]
    pub ocp: OcpTable,
}

impl ElectrodeParameters {
    /// Active-material volume fraction implied by spherical particles, `a R / 3`.
    pub fn solid_fraction(&self) -> f64 {
        self.specific_area * self.particle_radius / 3.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparatorParameters {
    /// m
    pub thickness: f64,
    pub electrolyte_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrolyteParameters {
    /// Reference diffusivity before the Bruggeman correction, m²/s.
    pub diffusivity: f64,
    pub bruggeman: f64,
    /// Cation transference number.
    pub transference: f64,
    /// Effective conductivity, S/m.
    pub conductivity: f64,
    /// Constant thermodynamic activity factor in the concentration-polarization gain.
    pub activity_factor: f64,
    /// Uniform rest concentration, mol/m³.
    pub initial_concentration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermalParameters {
    /// kg
    pub mass: f64,
    /// J/(kg·K)
    pub specific_heat: f64,
    /// K/W
    pub thermal_resistance: f64,
    /// K
    pub ambient_temperature: f64,
}

impl ThermalParameters {
    /// Time constant `m c_p R_th` of the lumped thermal model, s.
    pub fn time_constant(&self) -> f64 {
        self.mass * self.specific_heat * self.thermal_resistance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParameters {
    /// Electrode plate area, m².
    pub plate_area: f64,
    /// Charge-transfer symmetry factor.
    pub symmetry_factor: f64,
    /// C/mol
    pub faraday: f64,
    /// J/(mol·K)
    pub gas_constant: f64,
    /// Cathode stoichiometry when the anode is fully delithiated. Fixes the
    /// cathode state that balances a given anode state of charge.
    pub cathode_stoich_at_anode_empty: f64,
    pub anode: ElectrodeParameters,
    pub separator: SeparatorParameters,
    pub cathode: ElectrodeParameters,
    pub electrolyte: ElectrolyteParameters,
    pub thermal: ThermalParameters,
}

impl CellParameters {
    /// Built-in graphite / NMC cell.
    pub fn default_graphite_nmc() -> Self {
        let mut params: CellParameters =
            toml::from_str(DEFAULT_CELL_TOML).expect("embedded parameter file is valid TOML");
        params.anode.ocp = OcpTable::from_csv_str(DEFAULT_ANODE_OCP, "graphite_ocp.csv")
            .expect("embedded anode OCP table");
        params.cathode.ocp = OcpTable::from_csv_str(DEFAULT_CATHODE_OCP, "nmc_ocp.csv")
            .expect("embedded cathode OCP table");
        params.validate().expect("embedded parameters are valid");
        params
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    /// Parses a parameter file, loading OCP tables relative to `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut params: CellParameters =
            toml::from_str(text).map_err(|e| Error::parse("parameter file", e))?;
        for electrode in [&mut params.anode, &mut params.cathode] {
            let path = resolve(base_dir, &electrode.ocp_table);
            electrode.ocp = OcpTable::from_file(&path)?;
        }
        params.validate()?;
        Ok(params)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("parameters serialize")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("plate_area", self.plate_area),
            ("faraday", self.faraday),
            ("gas_constant", self.gas_constant),
            ("separator.thickness", self.separator.thickness),
            ("electrolyte.diffusivity", self.electrolyte.diffusivity),
            ("electrolyte.bruggeman", self.electrolyte.bruggeman),
            ("electrolyte.conductivity", self.electrolyte.conductivity),
            ("electrolyte.activity_factor", self.electrolyte.activity_factor),
            ("electrolyte.initial_concentration", self.electrolyte.initial_concentration),
            ("thermal.mass", self.thermal.mass),
            ("thermal.specific_heat", self.thermal.specific_heat),
            ("thermal.thermal_resistance", self.thermal.thermal_resistance),
            ("thermal.ambient_temperature", self.thermal.ambient_temperature),
        ];
        for (name, value) in positive {
            check_positive(name, value)?;
        }
        let fractions = [
            ("symmetry_factor", self.symmetry_factor),
            ("electrolyte.transference", self.electrolyte.transference),
            ("separator.electrolyte_fraction", self.separator.electrolyte_fraction),
        ];
        for (name, value) in fractions {
            check_open_unit(name, value)?;
        }
        if !(self.cathode_stoich_at_anode_empty > 0.0 && self.cathode_stoich_at_anode_empty <= 1.0) {
            return Err(Error::param(
                "cathode_stoich_at_anode_empty",
                format!("must lie in (0, 1], got {}", self.cathode_stoich_at_anode_empty),
            ));
        }
        for (prefix, e) in [("anode", &self.anode), ("cathode", &self.cathode)] {
            let positive = [
                ("diffusivity", e.diffusivity),
                ("particle_radius", e.particle_radius),
                ("max_concentration", e.max_concentration),
                ("specific_area", e.specific_area),
                ("thickness", e.thickness),
                ("film_resistance", e.film_resistance),
                ("rate_constant", e.rate_constant),
            ];
            for (name, value) in positive {
                check_positive(&format!("{prefix}.{name}"), value)?;
            }
            check_open_unit(&format!("{prefix}.electrolyte_fraction"), e.electrolyte_fraction)?;
            let solid = e.solid_fraction();
            if !(solid > 0.0 && solid + e.electrolyte_fraction < 1.0) {
                return Err(Error::param(
                    format!("{prefix}.specific_area"),
                    format!("implied solid fraction {solid:.4} leaves no room for the electrolyte"),
                ));
            }
            if e.ocp.len() < OcpTable::MIN_POINTS {
                return Err(Error::param(format!("{prefix}.ocp_table"), "table not loaded"));
            }
        }
        Ok(())
    }

    /// Charge stored in the anode between empty and full lithiation, A·h.
    ///
    /// This is the capacity that defines 1C: bulk anode state of charge moves
    /// by exactly `|I| dt / (3600 Q)` under a current `I`.
    pub fn nominal_capacity_ah(&self) -> f64 {
        electrode_capacity_ah(&self.anode, self.plate_area, self.faraday)
    }

    pub fn cathode_capacity_ah(&self) -> f64 {
        electrode_capacity_ah(&self.cathode, self.plate_area, self.faraday)
    }

    /// Cathode stoichiometry that holds the lithium removed from an anode at
    /// stoichiometry `anode_stoich`.
    pub fn balanced_cathode_stoich(&self, anode_stoich: f64) -> f64 {
        self.cathode_stoich_at_anode_empty
            - anode_stoich * self.nominal_capacity_ah() / self.cathode_capacity_ah()
    }

    /// Open-circuit voltage of a cell at rest with the given anode stoichiometry.
    pub fn open_circuit_voltage(&self, anode_stoich: f64) -> f64 {
        self.cathode.ocp.eval(self.balanced_cathode_stoich(anode_stoich)) - self.anode.ocp.eval(anode_stoich)
    }
}

fn electrode_capacity_ah(e: &ElectrodeParameters, area: f64, faraday: f64) -> f64 {
    e.max_concentration * e.solid_fraction() * area * e.thickness * faraday / 3600.0
}

fn resolve(base: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_positive(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be finite and positive, got {value}")))
    }
}

fn check_open_unit(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("must lie in (0, 1), got {value}")))
    }
}

/// Grid resolution and inner time step of the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Discretization {
    pub n_r_anode: usize,
    pub n_r_cathode: usize,
    pub n_x_anode: usize,
    pub n_x_separator: usize,
    pub n_x_cathode: usize,
    /// Inner integration step, s.
    pub dt_sim: f64,
}

impl Default for Discretization {
    fn default() -> Self {
        Self {
            n_r_anode: 10,
            n_r_cathode: 10,
            n_x_anode: 15,
            n_x_separator: 10,
            n_x_cathode: 15,
            dt_sim: 1.0,
        }
    }
}

impl Discretization {
    pub fn electrolyte_nodes(&self) -> usize {
        self.n_x_anode + self.n_x_separator + self.n_x_cathode
    }

    /// Solid shells, electrolyte nodes and the lumped temperature.
    pub fn state_count(&self) -> usize {
        self.n_r_anode + self.n_r_cathode + self.electrolyte_nodes() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_r_anode", self.n_r_anode),
            ("n_r_cathode", self.n_r_cathode),
            ("n_x_anode", self.n_x_anode),
            ("n_x_separator", self.n_x_separator),
            ("n_x_cathode", self.n_x_cathode),
        ];
        for (name, n) in counts {
            if n < 2 {
                return Err(Error::param(name, format!("needs at least 2 cells, got {n}")));
            }
        }
        check_positive("dt_sim", self.dt_sim)
    }

    /// Every count multiplied and the inner step divided by `factor`.
    pub fn refined(&self, factor: usize) -> Self {
        let f = factor.max(1);
        Self {
            n_r_anode: self.n_r_anode * f,
            n_r_cathode: self.n_r_cathode * f,
            n_x_anode: self.n_x_anode * f,
            n_x_separator: self.n_x_separator * f,
            n_x_cathode: self.n_x_cathode * f,
            dt_sim: self.dt_sim / f as f64,
        }
    }
}

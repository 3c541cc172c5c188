//! Constant-current charges of the default cell from 30 % to 80 % anode SOC.
//!
//! `cargo run --release --example cc_charge -- 0.5 1.0 1.8`

use rlcharge::params::{CellParameters, Discretization};
use rlcharge::spmet::{Electrode, SimulatorContext};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rates: Vec<f64> = std::env::args()
        .skip(1)
        .map(|a| a.parse())
        .collect::<Result<_, _>>()?;
    let rates = if rates.is_empty() { vec![1.0, 1.8] } else { rates };
    let params = CellParameters::default_graphite_nmc();
    let ctx = SimulatorContext::new(&params, &Discretization::default())?;
    println!("capacity {:.4} A h, OCV(0.3) {:.4} V, OCV(0.8) {:.4} V",
        ctx.capacity_ah(), params.open_circuit_voltage(0.3), params.open_circuit_voltage(0.8));
    for rate in rates {
        let current = -rate * ctx.capacity_ah();
        let mut state = ctx.equilibrium_state(0.3, 300.15)?;
        println!("# {rate}C");
        println!("{:>6} {:>7} {:>8} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "t_min", "soc", "V", "T_C", "ocp", "eta_a", "eta_c", "film", "ohm", "conc");
        let mut minute = 0;
        while ctx.bulk_soc(&state, Electrode::Anode) < 0.8 && minute < 200 {
            state = ctx.step(&state, current, 60.0)?;
            minute += 1;
            let v = ctx.terminal_voltage(&state, current)?;
            println!("{:6} {:7.4} {:8.4} {:7.2} {:7.4} {:7.4} {:7.4} {:7.4} {:7.4} {:7.4}",
                minute, ctx.bulk_soc(&state, Electrode::Anode), v.v_terminal, state.t_cell - 273.15,
                v.ocp_diff, v.eta_anode, v.eta_cathode, v.film_drop, v.electrolyte_ohmic,
                v.concentration_polarization);
        }
    }
    Ok(())
}

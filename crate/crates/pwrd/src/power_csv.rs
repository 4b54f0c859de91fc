use std::io::Write;

use pwrd_core::sim::PowerResult;

use crate::numfmt::num;
use crate::{Error, Result};

pub const POWER_COLUMNS: [&str; 9] =
    ["method", "regime", "effect_level", "icc", "p_spill", "power", "mc_se", "n_reps", "seed"];

/// Long format: one row per method and setting.
pub fn write_power<W: Write>(result: &PowerResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(POWER_COLUMNS)?;
    for r in &result.rows {
        w.write_record([
            r.method.as_str().to_string(),
            r.regime.as_str().to_string(),
            num(r.effect_level),
            num(r.icc),
            num(r.p_spill),
            num(r.power),
            num(r.mc_se),
            r.n_reps.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("power csv", e))?;
    Ok(())
}

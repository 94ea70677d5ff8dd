//! Field, ensemble and density serialization.
//!
//! Binary field layout (`STFD`, little-endian):
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `STFD` |
//! | 4 | version `u32` = 1 |
//! | 4×4 | `dim`, `M`, `K`, `codim` as `u32` |
//! | 2×8 | `L`, `T` as `f64` |
//! | 8·K·M^d·m | values in `(time, node, component)` order |
//!
//! CSV floats use the shortest representation that parses back to the same
//! bits, so both formats round-trip exactly.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::density::EmpiricalDensity;
use crate::error::{Error, Result};
use crate::grid::{Grid, SpaceTimeField};
use crate::simulation::{PathEnsemble, SimulationConfig};

pub const FIELD_MAGIC: &[u8; 4] = b"STFD";
pub const ENSEMBLE_MAGIC: &[u8; 4] = b"PENS";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated input: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if &self.bytes::<4>()? != magic {
            return Err(Error::Format(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn field_to_bytes(field: &SpaceTimeField) -> Vec<u8> {
    let g = field.grid();
    let mut out = Vec::with_capacity(40 + 8 * field.values().len());
    out.extend_from_slice(FIELD_MAGIC);
    for v in [
        FORMAT_VERSION,
        g.dim() as u32,
        g.points_per_axis() as u32,
        g.time_steps() as u32,
        field.codim() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_f64s(&mut out, &[g.half_width(), g.time_horizon()]);
    put_f64s(&mut out, field.values());
    out
}

pub fn field_from_bytes(bytes: &[u8]) -> Result<SpaceTimeField> {
    let mut r = Reader(bytes);
    r.header(FIELD_MAGIC)?;
    let (dim, m, k, codim) = (
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
    );
    let (l, t) = (r.f64()?, r.f64()?);
    let grid = Grid::new(dim, l, m, t, k)?;
    let n = grid.node_count() * k * codim;
    if r.0.len() != 8 * n {
        return Err(Error::Format(format!(
            "expected {n} values, found {} bytes",
            r.0.len()
        )));
    }
    SpaceTimeField::new(grid, codim, r.f64s(n)?)
}

pub fn write_field_binary(field: &SpaceTimeField, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, field_to_bytes(field))?)
}

pub fn read_field_binary(path: &Path) -> Result<SpaceTimeField> {
    field_from_bytes(&std::fs::read(path)?)
}

/// `# dim=.. M=.. K=.. L=.. T=.. m=..`, a column header, then one row per
/// `(time_index, node_index)`.
pub fn write_field_csv<W: Write>(field: &SpaceTimeField, mut w: W) -> Result<()> {
    let g = field.grid();
    let m = field.codim();
    writeln!(
        w,
        "# dim={} M={} K={} L={} T={} m={}",
        g.dim(),
        g.points_per_axis(),
        g.time_steps(),
        g.half_width(),
        g.time_horizon(),
        m
    )?;
    let cols: Vec<String> = (0..m).map(|c| format!("c{c}")).collect();
    writeln!(w, "time_index,node_index,{}", cols.join(","))?;
    for k in 0..g.time_steps() {
        for node in 0..g.node_count() {
            write!(w, "{k},{node}")?;
            for v in field.node_value(k, node) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

fn header_value<T: std::str::FromStr>(header: &str, key: &str) -> Result<T> {
    header
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
        .ok_or_else(|| Error::Format(format!("missing {key} in CSV header")))?
        .parse()
        .map_err(|_| Error::Format(format!("bad {key} in CSV header")))
}

pub fn read_field_csv<R: Read>(r: R) -> Result<SpaceTimeField> {
    let mut lines = BufReader::new(r).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Format("unexpected end of CSV".into()))?
            .map_err(Error::from)
    };
    let header = next()?;
    let header = header
        .strip_prefix('#')
        .ok_or_else(|| Error::Format("missing # header".into()))?;
    let grid = Grid::new(
        header_value(header, "dim")?,
        header_value(header, "L")?,
        header_value(header, "M")?,
        header_value(header, "T")?,
        header_value(header, "K")?,
    )?;
    let m: usize = header_value(header, "m")?;
    next()?;
    let rows = grid.time_steps() * grid.node_count();
    let mut values = Vec::with_capacity(rows * m);
    for expect in 0..rows {
        let line = next()?;
        let mut parts = line.split(',');
        let k: usize = parse(parts.next())?;
        let node: usize = parse(parts.next())?;
        if k * grid.node_count() + node != expect {
            return Err(Error::Format(format!("row {expect} out of order")));
        }
        for _ in 0..m {
            values.push(parse(parts.next())?);
        }
        if parts.next().is_some() {
            return Err(Error::Format(format!("row {expect} has extra columns")));
        }
    }
    SpaceTimeField::new(grid, m, values)
}

fn parse<T: std::str::FromStr>(s: Option<&str>) -> Result<T> {
    s.and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Format("malformed CSV cell".into()))
}

const NO_EXIT: u64 = u64::MAX;

/// `PENS` dump: header, config, times, paths, exit steps.
pub fn ensemble_to_bytes(e: &PathEnsemble) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * (e.paths.len() + e.times.len() + e.n_paths()));
    out.extend_from_slice(ENSEMBLE_MAGIC);
    for v in [
        FORMAT_VERSION,
        e.dim as u32,
        e.times.len() as u32,
        e.mollification_level as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [
        e.n_paths() as u64,
        e.master_seed,
        e.config.n_paths as u64,
        e.config.report_every as u64,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_f64s(&mut out, &[e.box_half_width, e.config.dt, e.config.horizon]);
    put_f64s(&mut out, &e.times);
    put_f64s(&mut out, &e.paths);
    for s in &e.exit_steps {
        out.extend_from_slice(&s.map_or(NO_EXIT, |s| s as u64).to_le_bytes());
    }
    for s in &e.seeds {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn ensemble_from_bytes(bytes: &[u8]) -> Result<PathEnsemble> {
    let mut r = Reader(bytes);
    r.header(ENSEMBLE_MAGIC)?;
    let (dim, nt, level) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let (n, master_seed, cfg_paths, every) = (
        r.u64()? as usize,
        r.u64()?,
        r.u64()? as usize,
        r.u64()? as usize,
    );
    let (box_half_width, dt, horizon) = (r.f64()?, r.f64()?, r.f64()?);
    let times = r.f64s(nt)?;
    let paths = r.f64s(n * nt * dim)?;
    let exit_steps: Vec<Option<usize>> = (0..n)
        .map(|_| r.u64().map(|s| (s != NO_EXIT).then_some(s as usize)))
        .collect::<Result<_>>()?;
    let seeds = (0..n).map(|_| r.u64()).collect::<Result<_>>()?;
    if !r.0.is_empty() {
        return Err(Error::Format("trailing bytes in ensemble dump".into()));
    }
    Ok(PathEnsemble {
        times,
        dim,
        paths,
        seeds,
        master_seed,
        mollification_level: level,
        exit_flags: exit_steps.iter().map(Option::is_some).collect(),
        exit_steps,
        config: SimulationConfig {
            n_paths: cfg_paths,
            dt,
            horizon,
            report_every: every,
            master_seed,
        },
        box_half_width,
    })
}

pub fn write_ensemble(e: &PathEnsemble, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, ensemble_to_bytes(e))?)
}

pub fn read_ensemble(path: &Path) -> Result<PathEnsemble> {
    ensemble_from_bytes(&std::fs::read(path)?)
}

/// One row per time: `time_index,time,m_0,...`.
pub fn write_density_csv<W: Write>(d: &EmpiricalDensity, mut w: W) -> Result<()> {
    writeln!(w, "# dim={} bins={} L={}", d.dim, d.bins, d.half_width)?;
    let cols: Vec<String> = (0..d.bin_count()).map(|b| format!("m{b}")).collect();
    writeln!(w, "time_index,time,{}", cols.join(","))?;
    for (i, t) in d.times.iter().enumerate() {
        write!(w, "{i},{t}")?;
        for m in d.slice(i) {
            write!(w, ",{m}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{euler_maruyama, FnCoefficients, InitialLaw};
    use proptest::prelude::*;

    fn field(seed: u64, dim: usize, m: usize) -> SpaceTimeField {
        let g = Grid::new(dim, 1.5, 9, 0.7, 3).unwrap();
        let mut s = seed;
        let n = g.node_count() * g.time_steps() * m;
        let values = (0..n)
            .map(|_| {
                s = crate::rng::splitmix64(s);
                f64::from_bits((s >> 12) | 0x3ff0_0000_0000_0000) - 1.5 + (s % 7) as f64 * 1e-300
            })
            .collect();
        SpaceTimeField::new(g, m, values).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn field_formats_round_trip_bit_exactly(seed in any::<u64>(), dim in 1usize..=3, m in 1usize..=4) {
            let f = field(seed, dim, m);
            let bin = field_from_bytes(&field_to_bytes(&f)).unwrap();
            prop_assert_eq!(bin.grid(), f.grid());
            prop_assert!(bin.values().iter().zip(f.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
            let mut csv = Vec::new();
            write_field_csv(&f, &mut csv).unwrap();
            let back = read_field_csv(csv.as_slice()).unwrap();
            prop_assert_eq!(back.grid(), f.grid());
            prop_assert!(back.values().iter().zip(f.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn corrupted_inputs_are_rejected() {
        let f = field(1, 2, 2);
        let mut bytes = field_to_bytes(&f);
        assert!(field_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(field_from_bytes(&bytes).is_err());
        assert!(read_field_csv("dim=2\n".as_bytes()).is_err());
    }

    #[test]
    fn ensemble_dump_round_trips() {
        let c = FnCoefficients {
            dim: 2,
            half_width: 1.0,
            drift: Box::new(|_, x, o| {
                o[0] = -x[1];
                o[1] = x[0];
            }),
            diffusion: Box::new(|_, _, o| o.copy_from_slice(&[1.0, 0.0, 0.0, 1.0])),
        };
        let cfg = SimulationConfig {
            n_paths: 64,
            dt: 1e-2,
            horizon: 1.0,
            report_every: 5,
            master_seed: 9,
        };
        let e = euler_maruyama(
            &c,
            &InitialLaw::PointMass {
                point: vec![0.0, 0.0],
            },
            &cfg,
            4,
        )
        .unwrap();
        assert!(e.exit_flags.iter().any(|&x| x));
        let back = ensemble_from_bytes(&ensemble_to_bytes(&e)).unwrap();
        assert_eq!(back.paths, e.paths);
        assert_eq!(back.times, e.times);
        assert_eq!(back.exit_steps, e.exit_steps);
        assert_eq!(back.exit_flags, e.exit_flags);
        assert_eq!(back.seeds, e.seeds);
        assert_eq!(back.config, e.config);
        assert_eq!(back.mollification_level, 4);
        assert_eq!(ensemble_to_bytes(&back), ensemble_to_bytes(&e));
    }
}

//! Trajectory persistence: a CSV form and the compact `HERD1` binary form.
//!
//! `HERD1` layout (all integers `u32`, all reals `f64`, little-endian):
//!
//! ```text
//! magic  "HERD1"            5 bytes
//! d, N, m, snapshots        4 × u32
//! per snapshot:
//!   t                        f64
//!   followers                N·d × f64, particle-major
//!   herders                  m·d × f64
//! ```

use std::io::{BufRead, Read, Write};

use crate::error::{HerdError, Result};
use crate::particle::SystemState;

pub const HERD1_MAGIC: &[u8; 5] = b"HERD1";

/// Header row of the trajectory CSV for dimension `d`.
pub fn trajectory_csv_header(d: usize) -> String {
    let mut h = String::from("t,kind,id");
    for c in 1..=d {
        h.push_str(&format!(",x{c}"));
    }
    h
}

/// Appends one node: a row per follower, then a row per herder.
pub fn write_state_csv<W: Write>(state: &SystemState, out: &mut W) -> Result<()> {
    let d = state.dim();
    let t = state.t;
    for (kind, data) in [("follower", state.followers()), ("herder", state.herders())] {
        for (id, x) in data.chunks(d).enumerate() {
            write!(out, "{t},{kind},{id}")?;
            for v in x {
                write!(out, ",{v}")?;
            }
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn write_trajectory_csv<W: Write>(states: &[SystemState], mut out: W) -> Result<()> {
    let d = states.first().map_or(1, |s| s.dim());
    writeln!(out, "{}", trajectory_csv_header(d))?;
    for s in states {
        write_state_csv(s, &mut out)?;
    }
    Ok(())
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| HerdError::Format(format!("{what} = {n} does not fit the HERD1 header")))
}

/// Streaming `HERD1` writer; the snapshot count is fixed up front.
pub struct Herd1Writer<W: Write> {
    out: W,
    dim: usize,
    followers: usize,
    herders: usize,
    remaining: usize,
}

impl<W: Write> Herd1Writer<W> {
    pub fn new(mut out: W, dim: usize, followers: usize, herders: usize, snapshots: usize) -> Result<Self> {
        out.write_all(HERD1_MAGIC)?;
        for (v, what) in [(dim, "d"), (followers, "N"), (herders, "m"), (snapshots, "snapshots")] {
            out.write_all(&u32_of(v, what)?.to_le_bytes())?;
        }
        Ok(Herd1Writer {
            out,
            dim,
            followers,
            herders,
            remaining: snapshots,
        })
    }

    pub fn push(&mut self, state: &SystemState) -> Result<()> {
        if self.remaining == 0 {
            return Err(HerdError::Format("more snapshots than declared in the header".into()));
        }
        if state.dim() != self.dim || state.n_followers() != self.followers || state.n_herders() != self.herders {
            return Err(HerdError::Format("snapshot shape differs from the header".into()));
        }
        self.out.write_all(&state.t.to_le_bytes())?;
        for v in state.followers().iter().chain(state.herders()) {
            self.out.write_all(&v.to_le_bytes())?;
        }
        self.remaining -= 1;
        Ok(())
    }

    /// Checks that every declared snapshot was written and returns the sink.
    pub fn finish(mut self) -> Result<W> {
        if self.remaining != 0 {
            return Err(HerdError::Format(format!("{} declared snapshots missing", self.remaining)));
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_herd1<W: Write>(states: &[SystemState], out: W) -> Result<()> {
    let first = states
        .first()
        .ok_or_else(|| HerdError::Format("cannot write an empty trajectory".into()))?;
    let mut w = Herd1Writer::new(out, first.dim(), first.n_followers(), first.n_herders(), states.len())?;
    for s in states {
        w.push(s)?;
    }
    w.finish()?;
    Ok(())
}

/// Header of a `HERD1` stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Herd1Header {
    pub dim: usize,
    pub followers: usize,
    pub herders: usize,
    pub snapshots: usize,
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => HerdError::Format(format!("truncated HERD1 data while reading {what}")),
        _ => HerdError::Io(e),
    })
}

/// Reader positioned after the header.
pub struct Herd1Reader<R: Read> {
    input: R,
    header: Herd1Header,
    read: usize,
}

impl<R: Read> Herd1Reader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        read_exact(&mut input, &mut magic, "magic")?;
        if &magic != HERD1_MAGIC {
            return Err(HerdError::Format("not a HERD1 stream (bad magic)".into()));
        }
        let mut fields = [0usize; 4];
        for f in &mut fields {
            let mut b = [0u8; 4];
            read_exact(&mut input, &mut b, "header")?;
            *f = u32::from_le_bytes(b) as usize;
        }
        let [dim, followers, herders, snapshots] = fields;
        if dim == 0 {
            return Err(HerdError::Format("HERD1 header declares d = 0".into()));
        }
        Ok(Herd1Reader {
            input,
            header: Herd1Header {
                dim,
                followers,
                herders,
                snapshots,
            },
            read: 0,
        })
    }

    pub fn header(&self) -> Herd1Header {
        self.header
    }

    /// Next snapshot, or `None` after the declared count.
    pub fn next_state(&mut self) -> Result<Option<SystemState>> {
        if self.read == self.header.snapshots {
            return Ok(None);
        }
        let h = self.header;
        let mut b = [0u8; 8];
        let mut next = |what: &str| -> Result<f64> {
            read_exact(&mut self.input, &mut b, what)?;
            Ok(f64::from_le_bytes(b))
        };
        let t = next("time")?;
        let followers = (0..h.followers * h.dim).map(|_| next("followers")).collect::<Result<Vec<_>>>()?;
        let herders = (0..h.herders * h.dim).map(|_| next("herders")).collect::<Result<Vec<_>>>()?;
        let mut state = SystemState::new(h.dim, followers, herders)?;
        state.t = t;
        state.step = self.read as u64;
        self.read += 1;
        Ok(Some(state))
    }
}

pub fn read_herd1<R: Read>(input: R) -> Result<Vec<SystemState>> {
    let mut reader = Herd1Reader::new(input)?;
    let mut states = Vec::with_capacity(reader.header().snapshots);
    while let Some(s) = reader.next_state()? {
        states.push(s);
    }
    Ok(states)
}

/// Streams a `HERD1` file into the trajectory CSV form.
pub fn herd1_to_csv<R: Read, W: Write>(input: R, mut out: W) -> Result<usize> {
    let mut reader = Herd1Reader::new(input)?;
    writeln!(out, "{}", trajectory_csv_header(reader.header().dim))?;
    let mut count = 0;
    while let Some(s) = reader.next_state()? {
        write_state_csv(&s, &mut out)?;
        count += 1;
    }
    out.flush()?;
    Ok(count)
}

/// Parses the trajectory CSV form back into states.
pub fn read_trajectory_csv<R: BufRead>(input: R) -> Result<Vec<SystemState>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| HerdError::Format("empty trajectory CSV".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..3] != ["t", "kind", "id"] {
        return Err(HerdError::Format(format!("unexpected trajectory header `{header}`")));
    }
    let d = cols.len() - 3;
    let mut states: Vec<SystemState> = Vec::new();
    let mut current: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let flush = |states: &mut Vec<SystemState>, cur: (f64, Vec<f64>, Vec<f64>)| -> Result<()> {
        let mut s = SystemState::new(d, cur.1, cur.2)?;
        s.t = cur.0;
        s.step = states.len() as u64;
        states.push(s);
        Ok(())
    };
    for (i, line) in lines.enumerate() {
        let line = line?;
        let parts: Vec<&str> = line.split(',').collect();
        let bad = || HerdError::Format(format!("line {}: `{line}`", i + 2));
        if parts.len() != d + 3 {
            return Err(bad());
        }
        let t: f64 = parts[0].parse().map_err(|_| bad())?;
        let x = parts[3..].iter().map(|p| p.parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
        let starts_node = parts[1] == "follower" && parts[2] == "0"
            || current.as_ref().is_some_and(|c| c.0 != t);
        if starts_node || current.is_none() {
            if let Some(cur) = current.take() {
                flush(&mut states, cur)?;
            }
            current = Some((t, Vec::new(), Vec::new()));
        }
        let cur = current.as_mut().expect("node started");
        match parts[1] {
            "follower" => cur.1.extend(x),
            "herder" => cur.2.extend(x),
            _ => return Err(bad()),
        }
    }
    if let Some(cur) = current {
        flush(&mut states, cur)?;
    }
    Ok(states)
}

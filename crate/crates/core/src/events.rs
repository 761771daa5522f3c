//! Event streams: CSV and binary I/O, and the temporal voxel grid.
//!
//! CSV rows are `t_us,x,y,p` with an optional header line. Polarity may be
//! written as `-1/1` or `0/1`; `0` reads as `-1`.
//!
//! The binary format is the magic `EVT1`, then `u16 H` and `u16 W`, then one
//! 13-byte record per event (`u64 t`, `u16 x`, `u16 y`, `i8 p`), all
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EVT1";
const HEADER_LEN: usize = 8;
const RECORD_LEN: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    /// Column.
    pub x: u16,
    /// Row.
    pub y: u16,
    /// `-1` or `+1`.
    pub polarity: i8,
}

/// Events sorted by time, with the sensor extent they were validated against.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    /// `.csv` is CSV, anything else is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => EventFormat::Csv,
            _ => EventFormat::Binary,
        }
    }
}

impl FromStr for EventFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(EventFormat::Csv),
            "binary" | "bin" => Ok(EventFormat::Binary),
            _ => Err(Error::invalid(format!("unknown event format {s:?} (csv or binary)"))),
        }
    }
}

impl EventStream {
    /// Sorts by time (stably) and checks coordinates against `dims`, or
    /// infers `(H, W)` from the largest coordinates when `dims` is `None`.
    pub fn new(mut events: Vec<Event>, dims: Option<(usize, usize)>) -> Result<Self> {
        if events.windows(2).any(|p| p[0].t > p[1].t) {
            log::debug!("sorting {} events by timestamp", events.len());
            events.sort_by_key(|e| e.t);
        }
        let (height, width) = match dims {
            Some(d) => d,
            None => events.iter().fold((0, 0), |(h, w), e| {
                (h.max(e.y as usize + 1), w.max(e.x as usize + 1))
            }),
        };
        if let Some(e) = events
            .iter()
            .find(|e| e.y as usize >= height || e.x as usize >= width)
        {
            return Err(Error::invalid(format!(
                "event at (x={}, y={}) outside {height}×{width} sensor",
                e.x, e.y
            )));
        }
        Ok(Self { events, height, width })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// `[first t, last t]`, or `None` for an empty stream.
    pub fn default_window(&self) -> Option<(u64, u64)> {
        Some((self.events.first()?.t, self.events.last()?.t))
    }

    pub fn polarity_sum(&self) -> i64 {
        self.events.iter().map(|e| e.polarity as i64).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.into());
        w.write_record(["t_us", "x", "y", "p"]).map_err(io)?;
        for e in &self.events {
            w.write_record(&[
                e.t.to_string(),
                e.x.to_string(),
                e.y.to_string(),
                e.polarity.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, out: W) -> Result<()> {
        let dim = |n: usize| {
            u16::try_from(n).map_err(|_| Error::invalid(format!("extent {n} does not fit in u16")))
        };
        let mut w = BufWriter::new(out);
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(dim(self.height)?)?;
        w.write_u16::<LittleEndian>(dim(self.width)?)?;
        for e in &self.events {
            w.write_u64::<LittleEndian>(e.t)?;
            w.write_u16::<LittleEndian>(e.x)?;
            w.write_u16::<LittleEndian>(e.y)?;
            w.write_i8(e.polarity)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path, format: EventFormat) -> Result<()> {
        let f = File::create(path)?;
        match format {
            EventFormat::Csv => self.write_csv(BufWriter::new(f)),
            EventFormat::Binary => self.write_binary(f),
        }
    }
}

pub fn parse_events(
    path: &Path,
    format: EventFormat,
    dims: Option<(usize, usize)>,
) -> Result<EventStream> {
    let f = BufReader::new(File::open(path)?);
    match format {
        EventFormat::Csv => parse_csv(f, dims),
        EventFormat::Binary => parse_binary(f, dims),
    }
}

pub fn parse_csv<R: Read>(input: R, dims: Option<(usize, usize)>) -> Result<EventStream> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);
    let mut events = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse { line, msg: e.to_string() }
        })?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        let err = |msg: String| Error::Parse { line, msg };
        if rec.len() != 4 {
            return Err(err(format!("expected 4 fields t_us,x,y,p, found {}", rec.len())));
        }
        if i == 0 && rec[0].parse::<u64>().is_err() && rec[0].starts_with(|c: char| c.is_alphabetic()) {
            continue;
        }
        let field = |k: usize, name: &str| -> Result<i64> {
            rec[k]
                .parse::<i64>()
                .map_err(|_| err(format!("{name} is not an integer: {:?}", &rec[k])))
        };
        let t = u64::try_from(field(0, "t_us")?).map_err(|_| err("negative timestamp".into()))?;
        let coord = |k: usize, name: &str| -> Result<u16> {
            let v = field(k, name)?;
            u16::try_from(v).map_err(|_| err(format!("{name} = {v} is out of range")))
        };
        let x = coord(1, "x")?;
        let y = coord(2, "y")?;
        let polarity = match field(3, "p")? {
            1 => 1,
            0 | -1 => -1,
            p => return Err(err(format!("polarity must be -1, 0 or 1, got {p}"))),
        };
        if let Some((h, w)) = dims {
            if x as usize >= w || y as usize >= h {
                return Err(err(format!("event at (x={x}, y={y}) outside {h}×{w} sensor")));
            }
        }
        events.push(Event { t, x, y, polarity });
    }
    EventStream::new(events, dims)
}

/// Reads the binary format. `dims`, when given, must agree with the header.
pub fn parse_binary<R: Read>(input: R, dims: Option<(usize, usize)>) -> Result<EventStream> {
    let mut bytes = Vec::new();
    let mut input = input;
    input.read_to_end(&mut bytes)?;
    if bytes.is_empty() {
        return EventStream::new(Vec::new(), dims);
    }
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format { offset: 0, msg: "missing EVT1 header".into() });
    }
    let mut cur = &bytes[4..];
    let h = cur.read_u16::<LittleEndian>()? as usize;
    let w = cur.read_u16::<LittleEndian>()? as usize;
    if let Some(d) = dims {
        if d != (h, w) {
            return Err(Error::invalid(format!(
                "header declares {h}×{w} but {}×{} was requested",
                d.0, d.1
            )));
        }
    }
    let body = bytes.len() - HEADER_LEN;
    if !body.is_multiple_of(RECORD_LEN) {
        return Err(Error::Format {
            offset: HEADER_LEN + body / RECORD_LEN * RECORD_LEN,
            msg: "truncated event record".into(),
        });
    }
    let mut events = Vec::with_capacity(body / RECORD_LEN);
    for i in 0..body / RECORD_LEN {
        let offset = HEADER_LEN + i * RECORD_LEN;
        let t = cur.read_u64::<LittleEndian>()?;
        let x = cur.read_u16::<LittleEndian>()?;
        let y = cur.read_u16::<LittleEndian>()?;
        let polarity = cur.read_i8()?;
        if polarity != 1 && polarity != -1 {
            return Err(Error::Format { offset, msg: format!("polarity {polarity} is not ±1") });
        }
        if x as usize >= w || y as usize >= h {
            return Err(Error::Format {
                offset,
                msg: format!("event at (x={x}, y={y}) outside {h}×{w} sensor"),
            });
        }
        events.push(Event { t, x, y, polarity });
    }
    EventStream::new(events, Some((h, w)))
}

/// `B×H×W` polarity histogram over `[t_start, t_end]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub data: Tensor,
    pub t_start: u64,
    pub t_end: u64,
    /// Events that fell outside the window.
    pub dropped: usize,
}

impl VoxelGrid {
    pub fn bins(&self) -> usize {
        self.data.shape()[0]
    }
}

/// Bilinear temporal binning: an event at normalized time
/// `τ = (t − t_start)/(t_end − t_start)·(B−1)` splits its polarity between
/// bins `⌊τ⌋` and `⌊τ⌋+1`. With `B = 1` every event lands in the single bin.
///
/// Events are accumulated in `(t, y, x, p)` order so the grid does not depend
/// on how ties in `t` were ordered in the input.
pub fn voxelize(
    events: &[Event],
    bins: usize,
    height: usize,
    width: usize,
    t_start: u64,
    t_end: u64,
) -> Result<VoxelGrid> {
    if bins == 0 {
        return Err(Error::invalid("voxel grid needs at least one bin"));
    }
    if t_end <= t_start {
        return Err(Error::invalid(format!(
            "degenerate event window [{t_start}, {t_end}]"
        )));
    }
    let mut order: Vec<&Event> = events.iter().collect();
    order.sort_unstable_by_key(|e| (e.t, e.y, e.x, e.polarity));

    let plane = height * width;
    let mut data = vec![0.0; bins * plane];
    let span = (t_end - t_start) as f64;
    let last = (bins - 1) as f64;
    let mut dropped = 0;
    for e in order {
        if e.t < t_start || e.t > t_end {
            dropped += 1;
            continue;
        }
        let (x, y) = (e.x as usize, e.y as usize);
        if x >= width || y >= height {
            return Err(Error::invalid(format!(
                "event at (x={x}, y={y}) outside {height}×{width} grid"
            )));
        }
        let p = e.polarity as f64;
        let tau = (e.t - t_start) as f64 / span * last;
        let b0 = (tau.floor() as usize).min(bins - 1);
        let frac = tau - b0 as f64;
        let pix = y * width + x;
        data[b0 * plane + pix] += p * (1.0 - frac);
        if frac > 0.0 {
            data[(b0 + 1) * plane + pix] += p * frac;
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} events outside the window [{t_start}, {t_end}]");
    }
    Ok(VoxelGrid {
        data: Tensor::new(&[bins, height, width], data)?,
        t_start,
        t_end,
        dropped,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    #[default]
    None,
    MaxAbs,
    /// Divide by the standard deviation of the nonzero entries.
    Std,
}

impl FromStr for NormalizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormalizeMode::None),
            "max_abs" | "max-abs" => Ok(NormalizeMode::MaxAbs),
            "std" => Ok(NormalizeMode::Std),
            _ => Err(Error::invalid(format!(
                "unknown normalization {s:?} (none, max_abs or std)"
            ))),
        }
    }
}

/// Leaves the grid unchanged when the scale would be zero.
pub fn normalize_voxel(mut v: VoxelGrid, mode: NormalizeMode) -> VoxelGrid {
    let scale = match mode {
        NormalizeMode::None => return v,
        NormalizeMode::MaxAbs => v.data.max_abs(),
        NormalizeMode::Std => {
            let nz: Vec<f64> = v.data.data().iter().copied().filter(|&x| x != 0.0).collect();
            if nz.is_empty() {
                return v;
            }
            let n = nz.len() as f64;
            let mean = nz.iter().sum::<f64>() / n;
            (nz.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
        }
    };
    if scale > 0.0 {
        v.data.data_mut().iter_mut().for_each(|x| *x /= scale);
    }
    v
}

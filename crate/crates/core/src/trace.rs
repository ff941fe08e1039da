//! Per-component event traces and their canonical form.
//!
//! One record per line:
//!
//! ```text
//! t=<ns> c=<comp> ch=<chan> d=<tx|rx|local> ty=<type> dg=<hex16> sq=<n>
//! ```
//!
//! Raw files may append ` pl=<hex>` with the full payload; canonical text
//! drops it, and drops SYNC records unless strict.

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::proto::SimTime;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Tx,
    Rx,
    Local,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Tx => "tx",
            Direction::Rx => "rx",
            Direction::Local => "local",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub t: SimTime,
    pub component: String,
    pub channel: String,
    pub dir: Direction,
    pub ty: String,
    pub digest: u64,
    pub seq: u64,
}

impl TraceRecord {
    pub fn is_sync(&self) -> bool {
        self.ty == "SYNC"
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t={} c={} ch={} d={} ty={} dg={:016x} sq={}",
            self.t.0,
            self.component,
            self.channel,
            self.dir.as_str(),
            self.ty,
            self.digest,
            self.seq
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("trace line {line}: {reason}")]
pub struct TraceParseError {
    pub line: usize,
    pub reason: String,
}

/// Parses one raw or canonical line. `line_no` is only used in errors.
pub fn parse_line(line: &str, line_no: usize) -> Result<TraceRecord, TraceParseError> {
    let err = |reason: String| TraceParseError { line: line_no, reason };
    let mut fields = line.split(' ');
    let mut next = |key: &str| -> Result<&str, TraceParseError> {
        let f = fields.next().ok_or_else(|| err(format!("missing field {key}")))?;
        f.strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| err(format!("expected {key}=, found {f:?}")))
    };
    let t = next("t")?.parse::<u64>().map_err(|e| err(format!("t: {e}")))?;
    let component = next("c")?.to_string();
    let channel = next("ch")?.to_string();
    let dir = match next("d")? {
        "tx" => Direction::Tx,
        "rx" => Direction::Rx,
        "local" => Direction::Local,
        other => return Err(err(format!("bad direction {other:?}"))),
    };
    let ty = next("ty")?.to_string();
    let dg = next("dg")?;
    if dg.len() != 16 {
        return Err(err("digest must be 16 hex digits".into()));
    }
    let digest = u64::from_str_radix(dg, 16).map_err(|e| err(format!("dg: {e}")))?;
    let seq = next("sq")?.parse::<u64>().map_err(|e| err(format!("sq: {e}")))?;
    match fields.next() {
        None => {}
        Some(f) if f.starts_with("pl=") && fields.next().is_none() => {}
        Some(f) => return Err(err(format!("unexpected field {f:?}"))),
    }
    if component.is_empty() || channel.is_empty() || ty.is_empty() {
        return Err(err("empty field".into()));
    }
    Ok(TraceRecord { t: SimTime(t), component, channel, dir, ty, digest, seq })
}

pub fn parse(text: &str) -> Result<Vec<TraceRecord>, TraceParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

/// Stable textual form used for all run-equivalence checks.
pub fn canonicalize(raw: &str, strict: bool) -> Result<String, TraceParseError> {
    let mut recs = parse(raw)?;
    recs.retain(|r| strict || !r.is_sync());
    recs.sort_by_key(|r| (r.t, r.seq));
    let mut out = String::with_capacity(raw.len());
    for r in recs {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    /// 1-based line in the canonical text.
    pub line: usize,
    pub left: Option<String>,
    pub right: Option<String>,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |s: &Option<String>| s.clone().unwrap_or_else(|| "<end of trace>".into());
        write!(f, "line {}:\n  < {}\n  > {}", self.line, show(&self.left), show(&self.right))
    }
}

/// First differing line of two canonical traces.
pub fn first_divergence(a: &str, b: &str) -> Option<Divergence> {
    let mut la = a.lines();
    let mut lb = b.lines();
    let mut line = 0;
    loop {
        line += 1;
        match (la.next(), lb.next()) {
            (None, None) => return None,
            (x, y) if x == y => continue,
            (x, y) => {
                return Some(Divergence { line, left: x.map(str::to_string), right: y.map(str::to_string) })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TraceOptions {
    /// Write SYNC records.
    pub include_sync: bool,
    /// Append the full payload as hex.
    pub dump_payload: bool,
}

enum Sink {
    Off,
    Memory(Vec<String>),
    File(BufWriter<File>),
}

/// Writes one component's trace. Sequence numbers advance for every record,
/// written or filtered, so output with and without SYNC records lines up.
pub struct Tracer {
    component: String,
    opts: TraceOptions,
    seq: u64,
    sink: Sink,
}

impl fmt::Debug for Tracer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tracer").field("component", &self.component).field("seq", &self.seq).finish()
    }
}

impl Tracer {
    pub fn off(component: impl Into<String>) -> Self {
        Tracer { component: component.into(), opts: TraceOptions::default(), seq: 0, sink: Sink::Off }
    }

    pub fn memory(component: impl Into<String>, opts: TraceOptions) -> Self {
        Tracer { component: component.into(), opts, seq: 0, sink: Sink::Memory(Vec::new()) }
    }

    pub fn file(component: impl Into<String>, path: &Path, opts: TraceOptions) -> io::Result<Self> {
        let f = File::create(path)?;
        Ok(Tracer {
            component: component.into(),
            opts,
            seq: 0,
            sink: Sink::File(BufWriter::with_capacity(1 << 16, f)),
        })
    }

    pub fn component(&self) -> &str {
        &self.component
    }

    pub fn enabled(&self) -> bool {
        !matches!(self.sink, Sink::Off)
    }

    pub fn record(
        &mut self,
        t: SimTime,
        channel: &str,
        dir: Direction,
        ty: &str,
        payload: &[u8],
    ) -> io::Result<()> {
        let seq = self.seq;
        self.seq += 1;
        if matches!(self.sink, Sink::Off) || (ty == "SYNC" && !self.opts.include_sync) {
            return Ok(());
        }
        let rec = TraceRecord {
            t,
            component: self.component.clone(),
            channel: channel.to_string(),
            dir,
            ty: ty.to_string(),
            digest: fnv1a64(payload),
            seq,
        };
        let mut line = rec.to_string();
        if self.opts.dump_payload {
            line.push_str(" pl=");
            for b in payload {
                line.push_str(&format!("{b:02x}"));
            }
        }
        match &mut self.sink {
            Sink::Off => {}
            Sink::Memory(v) => v.push(line),
            Sink::File(w) => {
                w.write_all(line.as_bytes())?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        if let Sink::File(w) = &mut self.sink {
            w.flush()?;
        }
        Ok(())
    }

    /// Lines recorded so far by a memory tracer (empty otherwise).
    pub fn lines(&self) -> &[String] {
        match &self.sink {
            Sink::Memory(v) => v,
            _ => &[],
        }
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for l in self.lines() {
            s.push_str(l);
            s.push('\n');
        }
        s
    }
}

impl Drop for Tracer {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditViolation {
    /// Receiver processed a message at a time other than send time + latency.
    Latency { channel: String, index: usize, sent: SimTime, received: SimTime },
    /// The k-th received message does not match the k-th sent one.
    Mismatch { channel: String, index: usize },
    /// More receptions than transmissions.
    Phantom { channel: String, index: usize },
    /// A transmission that should have been processed before the end was not.
    Lost { channel: String, index: usize, sent: SimTime },
}

/// Checks that every message on one direction of a channel was processed
/// exactly `latency` after it was sent. Messages whose delivery time falls
/// at or after `until` may legitimately be unprocessed.
pub fn audit_latency(
    channel: &str,
    sent: &[TraceRecord],
    received: &[TraceRecord],
    latency: SimTime,
    until: SimTime,
) -> Result<usize, Vec<AuditViolation>> {
    let mut violations = Vec::new();
    for (i, rx) in received.iter().enumerate() {
        let Some(tx) = sent.get(i) else {
            violations.push(AuditViolation::Phantom { channel: channel.into(), index: i });
            continue;
        };
        if tx.ty != rx.ty || tx.digest != rx.digest {
            violations.push(AuditViolation::Mismatch { channel: channel.into(), index: i });
        }
        if rx.t != tx.t + latency {
            violations.push(AuditViolation::Latency {
                channel: channel.into(),
                index: i,
                sent: tx.t,
                received: rx.t,
            });
        }
    }
    for (i, tx) in sent.iter().enumerate().skip(received.len()) {
        if tx.t + latency < until {
            violations.push(AuditViolation::Lost { channel: channel.into(), index: i, sent: tx.t });
        }
    }
    if violations.is_empty() {
        Ok(received.len())
    } else {
        Err(violations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_known_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn records_in_order_and_parse_back() {
        let mut t = Tracer::memory("h0", TraceOptions::default());
        t.record(SimTime(100), "pci", Direction::Tx, "MMIO_WRITE", &[1, 2]).unwrap();
        t.record(SimTime(1100), "pci", Direction::Rx, "MMIO_COMPL", &[3]).unwrap();
        let recs = parse(&t.text()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].t, SimTime(100));
        assert_eq!(recs[1].seq, 1);
        assert_eq!(recs[1].digest, fnv1a64(&[3]));
    }

    #[test]
    fn sync_filtered_but_numbered() {
        let mut t = Tracer::memory("a", TraceOptions::default());
        t.record(SimTime(1), "x", Direction::Tx, "SYNC", &[]).unwrap();
        t.record(SimTime(2), "x", Direction::Tx, "PACKET", &[0; 14]).unwrap();
        assert_eq!(t.lines().len(), 1);
        assert!(t.lines()[0].ends_with("sq=1"));
    }

    #[test]
    fn canonicalize_is_idempotent_and_drops_payload() {
        let raw = "t=5 c=a ch=x d=tx ty=SYNC dg=cbf29ce484222325 sq=0\n\
                   t=7 c=a ch=x d=rx ty=PACKET dg=0000000000000001 sq=1 pl=00ff\n";
        let c1 = canonicalize(raw, false).unwrap();
        assert_eq!(c1, "t=7 c=a ch=x d=rx ty=PACKET dg=0000000000000001 sq=1\n");
        assert_eq!(canonicalize(&c1, false).unwrap(), c1);
        let strict = canonicalize(raw, true).unwrap();
        assert_eq!(strict.lines().count(), 2);
        assert_eq!(canonicalize(&strict, true).unwrap(), strict);
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(parse_line("t=1 c=a", 1).is_err());
        assert!(parse_line("t=x c=a ch=b d=tx ty=S dg=0000000000000000 sq=0", 1).is_err());
        assert!(parse_line("t=1 c=a ch=b d=up ty=S dg=0000000000000000 sq=0", 1).is_err());
        assert!(parse_line("t=1 c=a ch=b d=tx ty=S dg=00 sq=0", 1).is_err());
        assert!(parse_line("t=1 c=a ch=b d=tx ty=S dg=0000000000000000 sq=0 zz=1", 1).is_err());
    }

    #[test]
    fn divergence_reports_first_line() {
        assert_eq!(first_divergence("a\nb\n", "a\nb\n"), None);
        let d = first_divergence("a\nb\n", "a\nc\n").unwrap();
        assert_eq!(d.line, 2);
        let d = first_divergence("a\n", "a\nc\n").unwrap();
        assert_eq!((d.line, d.left), (2, None));
    }

    fn rec(t: u64, ty: &str, dg: u64) -> TraceRecord {
        TraceRecord {
            t: SimTime(t),
            component: "c".into(),
            channel: "ch".into(),
            dir: Direction::Tx,
            ty: ty.into(),
            digest: dg,
            seq: 0,
        }
    }

    #[test]
    fn audit_accepts_exact_latency_and_tail() {
        let tx = vec![rec(0, "PACKET", 1), rec(100, "PACKET", 2), rec(900, "PACKET", 3)];
        let rx = vec![rec(500, "PACKET", 1), rec(600, "PACKET", 2)];
        assert_eq!(audit_latency("ch", &tx, &rx, SimTime(500), SimTime(1000)), Ok(2));
        let late = vec![rec(500, "PACKET", 1), rec(601, "PACKET", 2)];
        assert!(audit_latency("ch", &tx, &late, SimTime(500), SimTime(1000)).is_err());
        let lost = vec![rec(500, "PACKET", 1)];
        assert!(audit_latency("ch", &tx, &lost, SimTime(500), SimTime(1000)).is_err());
    }
}

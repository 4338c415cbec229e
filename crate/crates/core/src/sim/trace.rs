use std::fmt::Write as _;
use std::io::{self, Write};

use crate::model::Digest;
use crate::sim::time::SimTime;

/// Line-oriented event log: `t=<ticks> node=<label> ev=<NAME> pkt=<id|-> [k=v]...`.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    lines: Vec<String>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, t: SimTime, node: &str, ev: &str, pkt: Option<u64>, extra: &[(&str, String)]) {
        let mut line = String::with_capacity(64);
        let _ = write!(line, "t={} node={} ev={} pkt=", t.ticks(), node, ev);
        match pkt {
            Some(id) => {
                let _ = write!(line, "{id}");
            }
            None => line.push('-'),
        }
        for (k, v) in extra {
            let _ = write!(line, " {k}={v}");
        }
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }

    pub fn digest(&self) -> Digest {
        Digest::of(self.render().as_bytes())
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        for l in &self.lines {
            writeln!(w, "{l}")?;
        }
        Ok(())
    }
}

/// A parsed trace line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceLine<'a> {
    pub t: u64,
    pub node: &'a str,
    pub ev: &'a str,
    pub pkt: Option<u64>,
    pub fields: Vec<(&'a str, &'a str)>,
}

impl<'a> TraceLine<'a> {
    pub fn parse(line: &'a str) -> Option<Self> {
        let mut parts = line.split(' ');
        let t = parts.next()?.strip_prefix("t=")?.parse().ok()?;
        let node = parts.next()?.strip_prefix("node=")?;
        let ev = parts.next()?.strip_prefix("ev=")?;
        let pkt = match parts.next()?.strip_prefix("pkt=")? {
            "-" => None,
            id => Some(id.parse().ok()?),
        };
        let fields = parts.filter_map(|p| p.split_once('=')).collect();
        Some(TraceLine {
            t,
            node,
            ev,
            pkt,
            fields,
        })
    }

    pub fn field(&self, key: &str) -> Option<&'a str> {
        self.fields.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut t = Trace::new();
        t.record(SimTime(7), "N1", "RREQ_TX", Some(3), &[("cid", "C1".into())]);
        t.record(SimTime(9), "N2", "FORMED", None, &[]);
        assert_eq!(t.lines()[0], "t=7 node=N1 ev=RREQ_TX pkt=3 cid=C1");
        let l = TraceLine::parse(&t.lines()[0]).unwrap();
        assert_eq!((l.t, l.node, l.ev, l.pkt), (7, "N1", "RREQ_TX", Some(3)));
        assert_eq!(l.field("cid"), Some("C1"));
        assert_eq!(TraceLine::parse(&t.lines()[1]).unwrap().pkt, None);
    }
}

//! Emergency message model and the XML-like `<EMG>` wire format.
//!
//! Canonical layout, attribute order fixed:
//!
//! ```text
//! <EMG v="1" id="P-7-12" type="SOS" prio="0" from="10.1.0.7" to="10.99.0.1" load="35" swaps="0"><info>..</info><body>..</body><photo enc="base64">..</photo><trace>P-7,R-2</trace></EMG>
//! ```
//!
//! `photo` is optional. Text content is escaped with the five XML entities.

use std::fmt;
use std::str::FromStr;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{NodeId, SimAddress};

pub const FRAME_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MessageKind {
    Sos,
    Reply,
    WhereAmI,
    LocReply,
    LocAdvert,
}

impl MessageKind {
    pub const ALL: [MessageKind; 5] = [
        MessageKind::Sos,
        MessageKind::Reply,
        MessageKind::WhereAmI,
        MessageKind::LocReply,
        MessageKind::LocAdvert,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Sos => "SOS",
            MessageKind::Reply => "REPLY",
            MessageKind::WhereAmI => "WHEREAMI",
            MessageKind::LocReply => "LOCREPLY",
            MessageKind::LocAdvert => "LOCADVERT",
        }
    }

    /// Locating traffic bypasses the priority queues.
    pub fn is_locating(self) -> bool {
        matches!(
            self,
            MessageKind::WhereAmI | MessageKind::LocReply | MessageKind::LocAdvert
        )
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageKind {
    type Err = FrameError;

    fn from_str(s: &str) -> Result<Self, FrameError> {
        MessageKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| FrameError::BadAttribute("type", s.to_string()))
    }
}

/// Header priority level, 0 (most urgent) through 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Priority(u8);

impl Priority {
    pub const LEVELS: usize = 5;
    pub const HIGHEST: Priority = Priority(0);
    pub const LOWEST: Priority = Priority(4);

    pub fn new(level: u8) -> Option<Priority> {
        ((level as usize) < Self::LEVELS).then_some(Priority(level))
    }

    pub fn level(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// One step toward queue 0. `None` means the value went negative.
    pub fn decrement(self) -> Option<Priority> {
        self.0.checked_sub(1).map(Priority)
    }
}

impl TryFrom<u8> for Priority {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        Priority::new(v).ok_or_else(|| format!("priority {v} outside 0..4"))
    }
}

impl From<Priority> for u8 {
    fn from(p: Priority) -> u8 {
        p.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmergencyMessage {
    pub id: String,
    pub kind: MessageKind,
    pub priority: Priority,
    pub origin: SimAddress,
    pub dest: SimAddress,
    /// Sender's load in percent, carried end to end.
    pub source_load: u8,
    pub personal_info: String,
    pub body: String,
    pub photo: Option<Vec<u8>>,
    pub trace: Vec<NodeId>,
    pub swap_count: u32,
}

impl EmergencyMessage {
    /// Originating node, taken from the `originator-seq` id.
    pub fn originator(&self) -> Option<NodeId> {
        let (node, seq) = self.id.rsplit_once('-')?;
        seq.parse::<u64>().ok()?;
        NodeId::new(node).ok()
    }

    pub fn to_frame(&self) -> String {
        let mut out = String::with_capacity(160 + self.body.len() + self.personal_info.len());
        out.push_str("<EMG v=\"");
        out.push_str(FRAME_VERSION);
        out.push_str("\" id=\"");
        escape_into(&self.id, &mut out);
        out.push_str("\" type=\"");
        out.push_str(self.kind.as_str());
        out.push_str(&format!(
            "\" prio=\"{}\" from=\"{}\" to=\"{}\" load=\"{}\" swaps=\"{}\">",
            self.priority.level(),
            self.origin,
            self.dest,
            self.source_load,
            self.swap_count
        ));
        out.push_str("<info>");
        escape_into(&self.personal_info, &mut out);
        out.push_str("</info><body>");
        escape_into(&self.body, &mut out);
        out.push_str("</body>");
        if let Some(photo) = &self.photo {
            out.push_str("<photo enc=\"base64\">");
            out.push_str(&base64::engine::general_purpose::STANDARD.encode(photo));
            out.push_str("</photo>");
        }
        out.push_str("<trace>");
        let trace: Vec<&str> = self.trace.iter().map(NodeId::as_str).collect();
        out.push_str(&trace.join(","));
        out.push_str("</trace></EMG>");
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_frame().into_bytes()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame is not valid UTF-8")]
    Utf8,
    #[error("malformed frame: {0}")]
    Syntax(String),
    #[error("unsupported frame version {0:?}")]
    Version(String),
    #[error("missing attribute {0:?}")]
    MissingAttribute(&'static str),
    #[error("bad value for {0:?}: {1:?}")]
    BadAttribute(&'static str, String),
    #[error("priority {0} outside 0..4")]
    PriorityRange(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parsed {
    Emergency(EmergencyMessage),
    NotEmergency,
}

/// Classifies and decodes an incoming packet.
pub fn parse_frame(bytes: &[u8]) -> Result<Parsed, FrameError> {
    if !bytes.starts_with(b"<EMG") {
        return Ok(Parsed::NotEmergency);
    }
    let text = std::str::from_utf8(bytes).map_err(|_| FrameError::Utf8)?;
    let mut cur = Cursor { rest: text };
    cur.expect("<EMG")?;
    let attrs = cur.attributes()?;
    cur.expect(">")?;

    let attr = |name: &'static str| -> Result<&str, FrameError> {
        attrs
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| v.as_str())
            .ok_or(FrameError::MissingAttribute(name))
    };
    let version = attr("v")?;
    if version != FRAME_VERSION {
        return Err(FrameError::Version(version.to_string()));
    }
    let prio_raw = attr("prio")?;
    let priority = prio_raw
        .parse::<u8>()
        .ok()
        .and_then(Priority::new)
        .ok_or_else(|| FrameError::PriorityRange(prio_raw.to_string()))?;
    let kind: MessageKind = attr("type")?.parse()?;
    let addr = |name: &'static str| -> Result<SimAddress, FrameError> {
        let v = attr(name)?;
        v.parse()
            .map_err(|_| FrameError::BadAttribute(name, v.to_string()))
    };
    let origin = addr("from")?;
    let dest = addr("to")?;
    let load_raw = attr("load")?;
    let source_load = load_raw
        .parse::<u8>()
        .ok()
        .filter(|l| *l <= 100)
        .ok_or_else(|| FrameError::BadAttribute("load", load_raw.to_string()))?;
    let swaps_raw = attr("swaps")?;
    let swap_count = swaps_raw
        .parse::<u32>()
        .map_err(|_| FrameError::BadAttribute("swaps", swaps_raw.to_string()))?;
    let id = attr("id")?.to_string();
    if id.is_empty() {
        return Err(FrameError::BadAttribute("id", id));
    }

    let personal_info = cur.element("info")?;
    let body = cur.element("body")?;
    let photo = if cur.rest.starts_with("<photo") {
        cur.expect("<photo")?;
        let pattrs = cur.attributes()?;
        match pattrs.as_slice() {
            [(k, v)] if *k == "enc" && v == "base64" => {}
            _ => {
                return Err(FrameError::Syntax(
                    "photo must declare enc=\"base64\"".into(),
                ))
            }
        }
        cur.expect(">")?;
        let raw = cur.until("</photo>")?;
        let data = base64::engine::general_purpose::STANDARD
            .decode(raw)
            .map_err(|e| FrameError::BadAttribute("photo", e.to_string()))?;
        Some(data)
    } else {
        None
    };
    let trace_raw = cur.element("trace")?;
    let trace = if trace_raw.is_empty() {
        Vec::new()
    } else {
        trace_raw
            .split(',')
            .map(|s| NodeId::new(s).map_err(|_| FrameError::BadAttribute("trace", s.to_string())))
            .collect::<Result<_, _>>()?
    };
    cur.expect("</EMG>")?;
    if !cur.rest.is_empty() {
        return Err(FrameError::Syntax("trailing bytes after </EMG>".into()));
    }

    Ok(Parsed::Emergency(EmergencyMessage {
        id,
        kind,
        priority,
        origin,
        dest,
        source_load,
        personal_info,
        body,
        photo,
        trace,
        swap_count,
    }))
}

struct Cursor<'a> {
    rest: &'a str,
}

impl<'a> Cursor<'a> {
    fn expect(&mut self, lit: &str) -> Result<(), FrameError> {
        match self.rest.strip_prefix(lit) {
            Some(r) => {
                self.rest = r;
                Ok(())
            }
            None => Err(FrameError::Syntax(format!("expected {lit:?}"))),
        }
    }

    fn until(&mut self, end: &str) -> Result<&'a str, FrameError> {
        let i = self
            .rest
            .find(end)
            .ok_or_else(|| FrameError::Syntax(format!("unterminated, expected {end:?}")))?;
        let (head, tail) = self.rest.split_at(i);
        self.rest = &tail[end.len()..];
        Ok(head)
    }

    /// `name="value"` pairs, each preceded by exactly one space.
    fn attributes(&mut self) -> Result<Vec<(&'a str, String)>, FrameError> {
        let mut out: Vec<(&'a str, String)> = Vec::new();
        while let Some(r) = self.rest.strip_prefix(' ') {
            self.rest = r;
            let eq = self
                .rest
                .find("=\"")
                .ok_or_else(|| FrameError::Syntax("attribute without value".into()))?;
            let name = &self.rest[..eq];
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphabetic()) {
                return Err(FrameError::Syntax(format!("bad attribute name {name:?}")));
            }
            self.rest = &self.rest[eq + 2..];
            let raw = self.until("\"")?;
            if out.iter().any(|(k, _)| *k == name) {
                return Err(FrameError::Syntax(format!("duplicate attribute {name:?}")));
            }
            out.push((name, unescape(raw)?));
        }
        Ok(out)
    }

    fn element(&mut self, tag: &str) -> Result<String, FrameError> {
        self.expect(&format!("<{tag}>"))?;
        let raw = self.until(&format!("</{tag}>"))?;
        unescape(raw)
    }
}

fn escape_into(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
}

fn unescape(s: &str) -> Result<String, FrameError> {
    if s.contains('<') {
        return Err(FrameError::Syntax("unescaped '<' in content".into()));
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find('&') {
        out.push_str(&rest[..i]);
        rest = &rest[i..];
        let end = rest
            .find(';')
            .ok_or_else(|| FrameError::Syntax("unterminated entity".into()))?;
        out.push(match &rest[..=end] {
            "&amp;" => '&',
            "&lt;" => '<',
            "&gt;" => '>',
            "&quot;" => '"',
            "&apos;" => '\'',
            other => return Err(FrameError::Syntax(format!("unknown entity {other}"))),
        });
        rest = &rest[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Location payload of WHEREAMI / LOCREPLY / LOCADVERT bodies:
/// `x=<m>;y=<m>;hops=<n>`, with `;route=a,b,..;q=<query id>` appended on
/// replies.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationBody {
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub hops: u32,
    pub route: Vec<NodeId>,
    pub query: Option<String>,
}

impl LocationBody {
    pub fn encode(&self) -> String {
        let mut parts = Vec::new();
        if let (Some(x), Some(y)) = (self.x, self.y) {
            parts.push(format!("x={x}"));
            parts.push(format!("y={y}"));
        }
        parts.push(format!("hops={}", self.hops));
        if !self.route.is_empty() {
            let r: Vec<&str> = self.route.iter().map(NodeId::as_str).collect();
            parts.push(format!("route={}", r.join(",")));
        }
        if let Some(q) = &self.query {
            parts.push(format!("q={q}"));
        }
        parts.join(";")
    }

    pub fn decode(s: &str) -> Option<LocationBody> {
        let mut body = LocationBody {
            x: None,
            y: None,
            hops: 0,
            route: Vec::new(),
            query: None,
        };
        let mut have_hops = false;
        for part in s.split(';') {
            let (k, v) = part.split_once('=')?;
            match k {
                "x" => body.x = Some(v.parse().ok()?),
                "y" => body.y = Some(v.parse().ok()?),
                "hops" => {
                    body.hops = v.parse().ok()?;
                    have_hops = true;
                }
                "route" => {
                    body.route = v
                        .split(',')
                        .map(NodeId::new)
                        .collect::<Result<_, _>>()
                        .ok()?
                }
                "q" if !v.is_empty() => body.query = Some(v.to_string()),
                _ => return None,
            }
        }
        (have_hops && body.x.is_some() == body.y.is_some()).then_some(body)
    }
}

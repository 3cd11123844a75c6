//! Canonical binary encoding.
//!
//! Frame: `version: u16 | body_len: u32 | body | crc32: u32`, little endian.
//! The checksum covers everything before it. Inside the body every enum is a
//! tag byte followed by its fields in declaration order, lists carry a count
//! prefix, and decoding rejects anything a re-encode would not reproduce.

use thiserror::Error;

use super::*;

pub const WIRE_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("decode error at offset {offset}: {kind}")]
pub struct DecodeError {
    pub offset: usize,
    pub kind: DecodeErrorKind,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeErrorKind {
    #[error("unknown version {0}")]
    UnknownVersion(u16),
    #[error("truncated input")]
    Truncated,
    #[error("checksum mismatch")]
    BadChecksum,
    #[error("unknown {what} tag 0x{tag:02x}")]
    UnknownTag { what: &'static str, tag: u8 },
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    pub fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }
    pub fn str(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }
    pub fn node(&mut self, n: NodeAddr) {
        self.u32(n.0);
    }
    pub fn time(&mut self, t: SimTime) {
        self.u64(t.0);
    }
    pub fn fidelity(&mut self, f: Fidelity) {
        self.f64(f.value());
    }
    pub fn name(&mut self, n: &ExternalName) {
        self.time(n.timestamp);
        self.node(n.minter);
        self.u32(n.seq);
    }

    /// Wrap the body in the versioned, checksummed frame.
    pub fn finish(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.buf.len() + 10);
        out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.buf.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.buf);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    /// Check the frame and position the reader at the start of the body.
    pub fn open(buf: &'a [u8]) -> Result<Self, DecodeError> {
        let err = |offset, kind| Err(DecodeError { offset, kind });
        if buf.len() < 2 {
            return err(buf.len(), DecodeErrorKind::Truncated);
        }
        let version = u16::from_le_bytes([buf[0], buf[1]]);
        if version != WIRE_VERSION {
            return err(0, DecodeErrorKind::UnknownVersion(version));
        }
        if buf.len() < 6 {
            return err(buf.len(), DecodeErrorKind::Truncated);
        }
        let len = u32::from_le_bytes([buf[2], buf[3], buf[4], buf[5]]) as usize;
        let end = 6usize.saturating_add(len);
        if buf.len() < end.saturating_add(4) {
            return err(buf.len(), DecodeErrorKind::Truncated);
        }
        if buf.len() > end + 4 {
            return err(end + 4, DecodeErrorKind::Trailing(buf.len() - end - 4));
        }
        let stored = u32::from_le_bytes([buf[end], buf[end + 1], buf[end + 2], buf[end + 3]]);
        if crc32fast::hash(&buf[..end]) != stored {
            return err(end, DecodeErrorKind::BadChecksum);
        }
        Ok(Reader { buf, pos: 6, end })
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn error<T>(&self, kind: DecodeErrorKind) -> Result<T, DecodeError> {
        Err(DecodeError {
            offset: self.pos,
            kind,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.pos + n > self.end {
            return self.error(DecodeErrorKind::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn i64(&mut self) -> Result<i64, DecodeError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64, DecodeError> {
        let at = self.pos;
        let v = f64::from_bits(self.u64()?);
        if v.is_nan() {
            return Err(DecodeError {
                offset: at,
                kind: DecodeErrorKind::Invalid("NaN".into()),
            });
        }
        Ok(v)
    }
    pub fn bool(&mut self) -> Result<bool, DecodeError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            t => {
                self.pos -= 1;
                self.error(DecodeErrorKind::UnknownTag { what: "bool", tag: t })
            }
        }
    }
    pub fn str(&mut self) -> Result<String, DecodeError> {
        let n = self.u16()? as usize;
        let at = self.pos;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| DecodeError {
            offset: at,
            kind: DecodeErrorKind::Invalid("utf-8".into()),
        })
    }
    pub fn node(&mut self) -> Result<NodeAddr, DecodeError> {
        Ok(NodeAddr(self.u32()?))
    }
    pub fn time(&mut self) -> Result<SimTime, DecodeError> {
        Ok(SimTime(self.u64()?))
    }
    pub fn fidelity(&mut self) -> Result<Fidelity, DecodeError> {
        let at = self.pos;
        let v = self.f64()?;
        Fidelity::new(v).map_err(|e| DecodeError {
            offset: at,
            kind: DecodeErrorKind::Invalid(e.to_string()),
        })
    }
    pub fn name(&mut self) -> Result<ExternalName, DecodeError> {
        Ok(ExternalName {
            timestamp: self.time()?,
            minter: self.node()?,
            seq: self.u32()?,
        })
    }

    pub fn tag(&mut self, what: &'static str, max: u8) -> Result<u8, DecodeError> {
        let t = self.u8()?;
        if t == 0 || t > max {
            self.pos -= 1;
            return self.error(DecodeErrorKind::UnknownTag { what, tag: t });
        }
        Ok(t)
    }

    /// Every body byte must have been consumed.
    pub fn close(self) -> Result<(), DecodeError> {
        if self.pos != self.end {
            return self.error(DecodeErrorKind::Trailing(self.end - self.pos));
        }
        Ok(())
    }
}

fn put_value(w: &mut Writer, v: Value) {
    match v {
        Value::Int(i) => {
            w.u8(1);
            w.i64(i)
        }
        Value::Real(r) => {
            w.u8(2);
            w.f64(r)
        }
    }
}

fn get_value(r: &mut Reader) -> Result<Value, DecodeError> {
    Ok(match r.tag("value", 2)? {
        1 => Value::Int(r.i64()?),
        _ => Value::Real(r.f64()?),
    })
}

fn put_refs(w: &mut Writer, refs: &[ResRef]) {
    w.u8(refs.len() as u8);
    for x in refs {
        w.u8(x.0);
    }
}

fn get_refs(r: &mut Reader) -> Result<Vec<ResRef>, DecodeError> {
    let n = r.u8()?;
    (0..n).map(|_| Ok(ResRef(r.u8()?))).collect()
}

fn put_condition(w: &mut Writer, c: &Condition) {
    match c {
        Condition::Cmp { var, op, value } => {
            w.u8(1);
            w.u16(var.0);
            w.u8(match op {
                CmpOp::Eq => 1,
                CmpOp::Lt => 2,
                CmpOp::Gt => 3,
                CmpOp::Le => 4,
                CmpOp::Ge => 5,
            });
            put_value(w, *value);
        }
        Condition::Timer { timer } => {
            w.u8(2);
            w.u16(timer.0);
        }
        Condition::Res {
            partner,
            min_fidelity,
            count,
        } => {
            w.u8(3);
            match partner {
                PartnerSpec::Any => w.u8(1),
                PartnerSpec::Node(n) => {
                    w.u8(2);
                    w.node(*n)
                }
            }
            w.fidelity(*min_fidelity);
            w.u8(*count);
        }
    }
}

fn get_condition(r: &mut Reader) -> Result<Condition, DecodeError> {
    Ok(match r.tag("condition", 3)? {
        1 => {
            let var = VarId(r.u16()?);
            let op = match r.tag("comparison", 5)? {
                1 => CmpOp::Eq,
                2 => CmpOp::Lt,
                3 => CmpOp::Gt,
                4 => CmpOp::Le,
                _ => CmpOp::Ge,
            };
            Condition::Cmp {
                var,
                op,
                value: get_value(r)?,
            }
        }
        2 => Condition::Timer {
            timer: TimerId(r.u16()?),
        },
        _ => {
            let partner = match r.tag("partner", 2)? {
                1 => PartnerSpec::Any,
                _ => PartnerSpec::Node(r.node()?),
            };
            Condition::Res {
                partner,
                min_fidelity: r.fidelity()?,
                count: r.u8()?,
            }
        }
    })
}

fn put_action(w: &mut Writer, a: &Action) {
    match a {
        Action::SetTimer {
            timer,
            duration,
            anchor,
        } => {
            w.u8(1);
            w.u16(timer.0);
            w.time(*duration);
            match anchor {
                TimerAnchor::Now => w.u8(1),
                TimerAnchor::PairAge(x) => {
                    w.u8(2);
                    w.u8(x.0)
                }
            }
        }
        Action::Promote { refs, stage } => {
            w.u8(2);
            put_refs(w, refs);
            w.u16(*stage);
        }
        Action::Free { refs } => {
            w.u8(3);
            put_refs(w, refs);
        }
        Action::Set { var, update } => {
            w.u8(4);
            w.u16(var.0);
            match update {
                VarUpdate::Add(v) => {
                    w.u8(1);
                    put_value(w, *v)
                }
                VarUpdate::Assign(v) => {
                    w.u8(2);
                    put_value(w, *v)
                }
            }
        }
        Action::Meas { refs, basis } => {
            w.u8(5);
            put_refs(w, refs);
            w.u8(match basis {
                Basis::Z => 1,
                Basis::X => 2,
                Basis::Random => 3,
            });
        }
        Action::Qcirc { refs, circuit } => {
            w.u8(6);
            put_refs(w, refs);
            w.u8(match circuit {
                Circuit::PurifyPair => 1,
                Circuit::Swap => 2,
                Circuit::Bsm => 3,
            });
        }
        Action::Send { kind, about, to } => {
            w.u8(7);
            w.u8(message_kind_tag(*kind));
            w.u8(about.0);
            match to {
                Destination::PartnerOf(x) => {
                    w.u8(1);
                    w.u8(x.0)
                }
                Destination::Node(n) => {
                    w.u8(2);
                    w.node(*n)
                }
            }
        }
    }
}

fn message_kind_tag(k: MessageKind) -> u8 {
    match k {
        MessageKind::Free => 1,
        MessageKind::Update => 2,
        MessageKind::MeasResult => 3,
        MessageKind::Transfer => 4,
    }
}

fn message_kind_from(t: u8) -> MessageKind {
    match t {
        1 => MessageKind::Free,
        2 => MessageKind::Update,
        3 => MessageKind::MeasResult,
        _ => MessageKind::Transfer,
    }
}

fn get_action(r: &mut Reader) -> Result<Action, DecodeError> {
    Ok(match r.tag("action", 7)? {
        1 => {
            let timer = TimerId(r.u16()?);
            let duration = r.time()?;
            let anchor = match r.tag("anchor", 2)? {
                1 => TimerAnchor::Now,
                _ => TimerAnchor::PairAge(ResRef(r.u8()?)),
            };
            Action::SetTimer {
                timer,
                duration,
                anchor,
            }
        }
        2 => Action::Promote {
            refs: get_refs(r)?,
            stage: r.u16()?,
        },
        3 => Action::Free {
            refs: get_refs(r)?,
        },
        4 => {
            let var = VarId(r.u16()?);
            let update = match r.tag("update", 2)? {
                1 => VarUpdate::Add(get_value(r)?),
                _ => VarUpdate::Assign(get_value(r)?),
            };
            Action::Set { var, update }
        }
        5 => {
            let refs = get_refs(r)?;
            let basis = match r.tag("basis", 3)? {
                1 => Basis::Z,
                2 => Basis::X,
                _ => Basis::Random,
            };
            Action::Meas { refs, basis }
        }
        6 => {
            let refs = get_refs(r)?;
            let circuit = match r.tag("circuit", 3)? {
                1 => Circuit::PurifyPair,
                2 => Circuit::Swap,
                _ => Circuit::Bsm,
            };
            Action::Qcirc { refs, circuit }
        }
        _ => {
            let kind = message_kind_from(r.tag("message kind", 4)?);
            let about = ResRef(r.u8()?);
            let to = match r.tag("destination", 2)? {
                1 => Destination::PartnerOf(ResRef(r.u8()?)),
                _ => Destination::Node(r.node()?),
            };
            Action::Send { kind, about, to }
        }
    })
}

pub fn put_ruleset(w: &mut Writer, rs: &RuleSet) {
    w.u64(rs.id.0);
    w.u64(rs.connection.0);
    w.node(rs.owner);
    w.u16(rs.stages.len() as u16);
    for st in &rs.stages {
        w.u16(st.id);
        w.u16(st.variables.len() as u16);
        for v in &st.variables {
            w.u16(v.id.0);
            w.str(&v.name);
            put_value(w, v.init);
        }
        w.u16(st.rules.len() as u16);
        for rule in &st.rules {
            w.u16(rule.id);
            w.u8(rule.conditions.len() as u8);
            for c in &rule.conditions {
                put_condition(w, c);
            }
            w.u8(rule.actions.len() as u8);
            for a in &rule.actions {
                put_action(w, a);
            }
        }
    }
}

pub fn get_ruleset(r: &mut Reader) -> Result<RuleSet, DecodeError> {
    let id = RuleSetId(r.u64()?);
    let connection = ConnectionId(r.u64()?);
    let owner = r.node()?;
    let n_stages = r.u16()?;
    let mut stages = Vec::with_capacity(n_stages.min(64) as usize);
    for _ in 0..n_stages {
        let sid = r.u16()?;
        let n_vars = r.u16()?;
        let mut variables = vec![];
        for _ in 0..n_vars {
            variables.push(VarDecl {
                id: VarId(r.u16()?),
                name: r.str()?,
                init: get_value(r)?,
            });
        }
        let n_rules = r.u16()?;
        let mut rules = vec![];
        for _ in 0..n_rules {
            let rid = r.u16()?;
            let nc = r.u8()?;
            let mut conditions = vec![];
            for _ in 0..nc {
                conditions.push(get_condition(r)?);
            }
            let na = r.u8()?;
            let mut actions = vec![];
            for _ in 0..na {
                actions.push(get_action(r)?);
            }
            rules.push(Rule {
                id: rid,
                conditions,
                actions,
            });
        }
        stages.push(Stage {
            id: sid,
            rules,
            variables,
        });
    }
    Ok(RuleSet {
        id,
        connection,
        owner,
        stages,
    })
}

pub fn encode_ruleset(rs: &RuleSet) -> Vec<u8> {
    let mut w = Writer::new();
    put_ruleset(&mut w, rs);
    w.finish()
}

pub fn decode_ruleset(bytes: &[u8]) -> Result<RuleSet, DecodeError> {
    let mut r = Reader::open(bytes)?;
    let rs = get_ruleset(&mut r)?;
    r.close()?;
    Ok(rs)
}

fn put_pauli(w: &mut Writer, p: Pauli) {
    w.u8(match p {
        Pauli::I => 1,
        Pauli::X => 2,
        Pauli::Z => 3,
        Pauli::XZ => 4,
    });
}

fn get_pauli(r: &mut Reader) -> Result<Pauli, DecodeError> {
    Ok(match r.tag("pauli", 4)? {
        1 => Pauli::I,
        2 => Pauli::X,
        3 => Pauli::Z,
        _ => Pauli::XZ,
    })
}

pub fn put_message(w: &mut Writer, m: &ProtocolMessage) {
    w.u64(m.connection.0);
    w.node(m.sender);
    w.u8(message_kind_tag(m.body.kind()));
    match &m.body {
        MessageBody::Free { name } => w.name(name),
        MessageBody::Update { name, correction } => {
            w.name(name);
            put_pauli(w, *correction);
        }
        MessageBody::MeasResult {
            kept,
            sacrificed,
            round,
            outcome,
        } => {
            w.name(kept);
            w.name(sacrificed);
            w.u32(*round);
            w.u8(*outcome);
        }
        MessageBody::Transfer {
            old_name,
            new_name,
            new_partner,
            correction,
            est_fidelity,
            rate,
        } => {
            w.name(old_name);
            w.name(new_name);
            w.node(*new_partner);
            match correction {
                None => w.u8(0),
                Some(p) => put_pauli(w, *p),
            }
            w.fidelity(*est_fidelity);
            w.f64(rate.0);
        }
    }
}

pub fn get_message(r: &mut Reader) -> Result<ProtocolMessage, DecodeError> {
    let connection = ConnectionId(r.u64()?);
    let sender = r.node()?;
    let body = match message_kind_from(r.tag("message kind", 4)?) {
        MessageKind::Free => MessageBody::Free { name: r.name()? },
        MessageKind::Update => MessageBody::Update {
            name: r.name()?,
            correction: get_pauli(r)?,
        },
        MessageKind::MeasResult => MessageBody::MeasResult {
            kept: r.name()?,
            sacrificed: r.name()?,
            round: r.u32()?,
            outcome: r.u8()?,
        },
        MessageKind::Transfer => {
            let old_name = r.name()?;
            let new_name = r.name()?;
            let new_partner = r.node()?;
            let correction = if r.u8()? == 0 {
                None
            } else {
                r.pos -= 1;
                Some(get_pauli(r)?)
            };
            MessageBody::Transfer {
                old_name,
                new_name,
                new_partner,
                correction,
                est_fidelity: r.fidelity()?,
                rate: DecayRate(r.f64()?),
            }
        }
    };
    Ok(ProtocolMessage {
        connection,
        sender,
        body,
    })
}

pub fn encode_message(m: &ProtocolMessage) -> Vec<u8> {
    let mut w = Writer::new();
    put_message(&mut w, m);
    w.finish()
}

pub fn decode_message(bytes: &[u8]) -> Result<ProtocolMessage, DecodeError> {
    let mut r = Reader::open(bytes)?;
    let m = get_message(&mut r)?;
    r.close()?;
    Ok(m)
}

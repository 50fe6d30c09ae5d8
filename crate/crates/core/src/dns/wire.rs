//! Minimal DNS wire format handling (RFC 1035).
//!
//! Only the header and the first question are decoded. Everything else in a
//! packet (further questions, EDNS0 OPT records) is carried along untouched
//! in [`DnsQuery::raw`] and forwarded as-is.

use thiserror::Error;

use crate::fqdn::{Fqdn, FqdnError};

pub const HEADER_LEN: usize = 12;

const FLAG_QR: u16 = 0x8000;
const FLAG_OPCODE_MASK: u16 = 0x7800;
const FLAG_RD: u16 = 0x0100;
const FLAG_RA: u16 = 0x0080;
const RCODE_MASK: u16 = 0x000f;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Rcode {
    NoError = 0,
    FormErr = 1,
    ServFail = 2,
    NxDomain = 3,
    NotImp = 4,
    Refused = 5,
}

impl Rcode {
    pub fn from_u8(value: u8) -> Option<Self> {
        Some(match value {
            0 => Rcode::NoError,
            1 => Rcode::FormErr,
            2 => Rcode::ServFail,
            3 => Rcode::NxDomain,
            4 => Rcode::NotImp,
            5 => Rcode::Refused,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MalformedPacket {
    #[error("packet shorter than the {HEADER_LEN}-byte header")]
    TooShort,
    #[error("packet is a response, not a query")]
    NotAQuery,
    #[error("packet carries no question")]
    NoQuestion,
    #[error("label runs past the end of the packet")]
    LabelOverrun,
    #[error("compression pointer in question name")]
    CompressedName,
    #[error("question truncated before type/class")]
    TruncatedQuestion,
    #[error("invalid query name: {0}")]
    InvalidName(#[from] FqdnError),
}

/// A decoded query: header fields plus the first question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsQuery {
    pub transaction_id: u16,
    pub qname: Fqdn,
    pub qtype: u16,
    pub qclass: u16,
    pub raw: Vec<u8>,
    /// Offset one past the first question's class field.
    question_end: usize,
}

impl DnsQuery {
    pub fn flags(&self) -> u16 {
        u16::from_be_bytes([self.raw[2], self.raw[3]])
    }

    /// The encoded first question (name, type, class).
    pub fn question_bytes(&self) -> &[u8] {
        &self.raw[HEADER_LEN..self.question_end]
    }
}

pub fn parse_query(packet: &[u8]) -> Result<DnsQuery, MalformedPacket> {
    if packet.len() < HEADER_LEN {
        return Err(MalformedPacket::TooShort);
    }
    let transaction_id = u16::from_be_bytes([packet[0], packet[1]]);
    let flags = u16::from_be_bytes([packet[2], packet[3]]);
    if flags & FLAG_QR != 0 {
        return Err(MalformedPacket::NotAQuery);
    }
    let qdcount = u16::from_be_bytes([packet[4], packet[5]]);
    if qdcount == 0 {
        return Err(MalformedPacket::NoQuestion);
    }

    let mut pos = HEADER_LEN;
    let mut labels: Vec<&[u8]> = Vec::new();
    loop {
        let Some(&len) = packet.get(pos) else {
            return Err(MalformedPacket::LabelOverrun);
        };
        pos += 1;
        if len == 0 {
            break;
        }
        if len & 0xc0 != 0 {
            // 0b11 is a pointer; 0b01/0b10 are reserved label types.
            return Err(MalformedPacket::CompressedName);
        }
        let end = pos + len as usize;
        if end > packet.len() {
            return Err(MalformedPacket::LabelOverrun);
        }
        labels.push(&packet[pos..end]);
        pos = end;
    }
    if labels.is_empty() {
        // Root queries carry no name worth logging.
        return Err(MalformedPacket::InvalidName(FqdnError::Empty));
    }
    let qname = Fqdn::from_labels(labels)?;

    if packet.len() < pos + 4 {
        return Err(MalformedPacket::TruncatedQuestion);
    }
    let qtype = u16::from_be_bytes([packet[pos], packet[pos + 1]]);
    let qclass = u16::from_be_bytes([packet[pos + 2], packet[pos + 3]]);

    Ok(DnsQuery {
        transaction_id,
        qname,
        qtype,
        qclass,
        raw: packet.to_vec(),
        question_end: pos + 4,
    })
}

/// Encodes a standard recursive query with a single question.
pub fn encode_query(transaction_id: u16, qname: &Fqdn, qtype: u16, qclass: u16) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + qname.as_str().len() + 6);
    out.extend_from_slice(&transaction_id.to_be_bytes());
    out.extend_from_slice(&FLAG_RD.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&[0; 6]);
    encode_name(&mut out, qname);
    out.extend_from_slice(&qtype.to_be_bytes());
    out.extend_from_slice(&qclass.to_be_bytes());
    out
}

fn encode_name(out: &mut Vec<u8>, name: &Fqdn) {
    for label in name.labels() {
        out.push(label.len() as u8);
        out.extend_from_slice(label.as_bytes());
    }
    out.push(0);
}

/// Builds a header-only answer to `query` echoing its id and first question,
/// with no resource records.
pub fn synthesize_response(query: &DnsQuery, rcode: Rcode) -> Vec<u8> {
    let question = query.question_bytes();
    let mut out = Vec::with_capacity(HEADER_LEN + question.len());
    let flags = FLAG_QR
        | (query.flags() & (FLAG_OPCODE_MASK | FLAG_RD))
        | FLAG_RA
        | rcode as u16;
    out.extend_from_slice(&query.transaction_id.to_be_bytes());
    out.extend_from_slice(&flags.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&[0; 6]);
    out.extend_from_slice(question);
    out
}

pub fn message_id(packet: &[u8]) -> Option<u16> {
    (packet.len() >= 2).then(|| u16::from_be_bytes([packet[0], packet[1]]))
}

pub fn response_rcode(packet: &[u8]) -> Option<u8> {
    (packet.len() >= HEADER_LEN).then(|| (u16::from_be_bytes([packet[2], packet[3]]) & RCODE_MASK) as u8)
}

pub fn answer_count(packet: &[u8]) -> Option<u16> {
    (packet.len() >= HEADER_LEN).then(|| u16::from_be_bytes([packet[6], packet[7]]))
}

pub fn is_response(packet: &[u8]) -> bool {
    packet.len() >= HEADER_LEN && u16::from_be_bytes([packet[2], packet[3]]) & FLAG_QR != 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn packet_with_question(name: &[u8]) -> Vec<u8> {
        let mut p = vec![0x12, 0x34, 0x01, 0x00, 0x00, 0x01, 0, 0, 0, 0, 0, 0];
        p.extend_from_slice(name);
        p.extend_from_slice(&[0x00, 0x01, 0x00, 0x01]);
        p
    }

    #[test]
    fn decodes_plain_labels() {
        let p = packet_with_question(b"\x03www\x06google\x03com\x00");
        let q = parse_query(&p).unwrap();
        assert_eq!(q.transaction_id, 0x1234);
        assert_eq!(q.qname.as_str(), "www.google.com");
        assert_eq!((q.qtype, q.qclass), (1, 1));
    }

    #[test]
    fn lowercases_qname() {
        let p = packet_with_question(b"\x03GUM\x06criteo\x03com\x00");
        assert_eq!(parse_query(&p).unwrap().qname.as_str(), "gum.criteo.com");
    }

    #[test]
    fn short_packet_is_malformed() {
        assert_eq!(parse_query(&[0u8; 8]), Err(MalformedPacket::TooShort));
    }

    #[test]
    fn rejects_structural_errors() {
        let mut no_q = packet_with_question(b"\x01a\x00");
        no_q[5] = 0;
        assert_eq!(parse_query(&no_q), Err(MalformedPacket::NoQuestion));

        let mut overrun = packet_with_question(b"");
        overrun.truncate(HEADER_LEN);
        overrun.extend_from_slice(b"\x09abc");
        assert_eq!(parse_query(&overrun), Err(MalformedPacket::LabelOverrun));

        let ptr = packet_with_question(b"\xc0\x0c");
        assert_eq!(parse_query(&ptr), Err(MalformedPacket::CompressedName));

        let mut trunc = packet_with_question(b"\x01a\x00");
        trunc.truncate(trunc.len() - 2);
        assert_eq!(parse_query(&trunc), Err(MalformedPacket::TruncatedQuestion));

        let mut resp = packet_with_question(b"\x01a\x00");
        resp[2] |= 0x80;
        assert_eq!(parse_query(&resp), Err(MalformedPacket::NotAQuery));

        let root = packet_with_question(b"\x00");
        assert!(matches!(parse_query(&root), Err(MalformedPacket::InvalidName(_))));

        let bad = packet_with_question(b"\x03a b\x00");
        assert!(matches!(parse_query(&bad), Err(MalformedPacket::InvalidName(_))));
    }

    #[test]
    fn synthesized_nxdomain_shape() {
        let name = Fqdn::new("config.unity3d.com").unwrap();
        let q = parse_query(&encode_query(0x1234, &name, 1, 1)).unwrap();
        let resp = synthesize_response(&q, Rcode::NxDomain);
        assert_eq!(message_id(&resp), Some(0x1234));
        assert!(is_response(&resp));
        assert_eq!(response_rcode(&resp), Some(3));
        assert_eq!(answer_count(&resp), Some(0));
        assert_eq!(&resp[HEADER_LEN..], q.question_bytes());
    }

    fn label() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9_][a-zA-Z0-9_-]{0,20}"
    }

    proptest! {
        #[test]
        fn parse_inverts_encode(labels in prop::collection::vec(label(), 1..8),
                                id in any::<u16>(), qtype in any::<u16>(), qclass in any::<u16>()) {
            let name = Fqdn::new(&labels.join(".")).unwrap();
            let q = parse_query(&encode_query(id, &name, qtype, qclass)).unwrap();
            prop_assert_eq!(q.transaction_id, id);
            prop_assert_eq!(&q.qname, &name);
            prop_assert_eq!((q.qtype, q.qclass), (qtype, qclass));
        }

        #[test]
        fn parse_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = parse_query(&bytes);
        }
    }
}

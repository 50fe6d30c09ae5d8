#![allow(dead_code)]

use std::net::{Ipv4Addr, SocketAddr};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use hickory_proto::op::{Message, MessageType, OpCode, Query, ResponseCode};
use hickory_proto::rr::rdata::A;
use hickory_proto::rr::{Name, RData, Record, RecordType};
use tokio::net::UdpSocket;

pub const STUB_ANSWER: Ipv4Addr = Ipv4Addr::new(127, 0, 0, 1);

/// Loopback resolver answering every A query with [`STUB_ANSWER`].
pub struct StubResolver {
    pub addr: SocketAddr,
    pub queries: Arc<AtomicUsize>,
}

impl StubResolver {
    pub async fn start() -> Self {
        let socket = UdpSocket::bind("127.0.0.1:0").await.unwrap();
        let addr = socket.local_addr().unwrap();
        let queries = Arc::new(AtomicUsize::new(0));
        let counter = Arc::clone(&queries);
        tokio::spawn(async move {
            let mut buf = vec![0u8; 4096];
            loop {
                let Ok((n, peer)) = socket.recv_from(&mut buf).await else { return };
                let Ok(req) = Message::from_vec(&buf[..n]) else { continue };
                counter.fetch_add(1, Ordering::SeqCst);
                let mut resp = Message::new();
                resp.set_id(req.id())
                    .set_message_type(MessageType::Response)
                    .set_op_code(OpCode::Query)
                    .set_recursion_desired(req.recursion_desired())
                    .set_recursion_available(true)
                    .set_response_code(ResponseCode::NoError);
                for q in req.queries() {
                    resp.add_query(q.clone());
                    if q.query_type() == RecordType::A {
                        resp.add_answer(Record::from_rdata(q.name().clone(), 60, RData::A(A(STUB_ANSWER))));
                    }
                }
                let _ = socket.send_to(&resp.to_vec().unwrap(), peer).await;
            }
        });
        StubResolver { addr, queries }
    }

    pub fn query_count(&self) -> usize {
        self.queries.load(Ordering::SeqCst)
    }
}

/// Sends one A query over UDP and returns the decoded reply.
pub async fn udp_query(server: SocketAddr, id: u16, name: &str) -> Message {
    let mut msg = Message::new();
    msg.set_id(id).set_message_type(MessageType::Query).set_recursion_desired(true);
    msg.add_query(Query::query(Name::from_ascii(name).unwrap(), RecordType::A));
    let socket = UdpSocket::bind("127.0.0.1:0").await.unwrap();
    socket.send_to(&msg.to_vec().unwrap(), server).await.unwrap();
    let mut buf = vec![0u8; 4096];
    let (n, _) = tokio::time::timeout(Duration::from_secs(3), socket.recv_from(&mut buf))
        .await
        .expect("reply within 3 s")
        .unwrap();
    Message::from_vec(&buf[..n]).unwrap()
}

/// Polls `cond` every 10 ms for up to 3 s.
pub async fn eventually(mut cond: impl FnMut() -> bool) -> bool {
    for _ in 0..300 {
        if cond() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    cond()
}

/// Minimal HTTP/1.1 exchange returning status and body.
pub async fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&str>) -> (u16, String) {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut conn = tokio::net::TcpStream::connect(addr).await.unwrap();
    let body = body.unwrap_or("");
    let req = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    );
    conn.write_all(req.as_bytes()).await.unwrap();
    let mut raw = Vec::new();
    tokio::time::timeout(Duration::from_secs(3), conn.read_to_end(&mut raw)).await.expect("response").unwrap();
    let text = String::from_utf8(raw).unwrap();
    let (head, rest) = text.split_once("\r\n\r\n").unwrap();
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    let chunked = head.to_ascii_lowercase().contains("transfer-encoding: chunked");
    (status, if chunked { dechunk(rest) } else { rest.to_string() })
}

fn dechunk(mut rest: &str) -> String {
    let mut out = String::new();
    while let Some((size, tail)) = rest.split_once("\r\n") {
        let n = usize::from_str_radix(size.trim(), 16).unwrap_or(0);
        if n == 0 {
            break;
        }
        out.push_str(&tail[..n]);
        rest = &tail[n + 2..];
    }
    out
}

/// Open server-sent event stream yielding `(event, data)` pairs.
pub struct SseClient {
    reader: tokio::io::BufReader<tokio::net::TcpStream>,
}

impl SseClient {
    pub async fn connect(addr: SocketAddr, path: &str) -> Self {
        use tokio::io::{AsyncBufReadExt, AsyncWriteExt};
        let mut conn = tokio::net::TcpStream::connect(addr).await.unwrap();
        let req = format!("GET {path} HTTP/1.1\r\nHost: {addr}\r\nAccept: text/event-stream\r\n\r\n");
        conn.write_all(req.as_bytes()).await.unwrap();
        let mut reader = tokio::io::BufReader::new(conn);
        let mut line = String::new();
        reader.read_line(&mut line).await.unwrap();
        assert!(line.contains(" 200 "), "stream status line {line:?}");
        loop {
            line.clear();
            reader.read_line(&mut line).await.unwrap();
            assert!(!line.to_ascii_lowercase().starts_with("content-type") || line.contains("text/event-stream"));
            if line == "\r\n" {
                break;
            }
        }
        SseClient { reader }
    }

    /// Next event with a data field; chunk framing lines and comments are skipped.
    pub async fn next(&mut self) -> (Option<String>, String) {
        use tokio::io::AsyncBufReadExt;
        let mut event = None;
        let mut data: Option<String> = None;
        loop {
            let mut line = String::new();
            let n = tokio::time::timeout(Duration::from_secs(3), self.reader.read_line(&mut line))
                .await
                .expect("event within 3 s")
                .unwrap();
            assert!(n > 0, "stream closed");
            let line = line.trim_end_matches(['\r', '\n']);
            if let Some(v) = line.strip_prefix("event:") {
                event = Some(v.trim().to_string());
            } else if let Some(v) = line.strip_prefix("data:") {
                data = Some(v.trim().to_string());
            } else if line.is_empty() {
                if let Some(d) = data.take() {
                    return (event, d);
                }
                event = None;
            }
        }
    }
}

//! Forwarding DNS proxy.
//!
//! Each incoming query is decoded, run through [`decide`], reported to the
//! capture sink, and then either relayed to the upstream resolver or answered
//! locally with a synthesized NXDOMAIN. Upstream responses are returned to the
//! client byte-for-byte.

use std::io;
use std::net::{Ipv4Addr, Ipv6Addr, SocketAddr};
use std::sync::Arc;
use std::time::Duration;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream, UdpSocket};
use tokio::sync::mpsc;
use tokio::time::{timeout, Instant};
use tracing::{debug, warn};

use super::filter::{decide, FilterDecision, SharedFilters};
use super::wire::{self, parse_query, synthesize_response, DnsQuery, Rcode};
use crate::fqdn::Fqdn;
use crate::logstore::RecordingFlag;

pub const DEFAULT_LISTEN: SocketAddr = SocketAddr::new(std::net::IpAddr::V4(Ipv4Addr::LOCALHOST), 5354);
pub const DEFAULT_UPSTREAM: SocketAddr = SocketAddr::new(std::net::IpAddr::V4(Ipv4Addr::new(1, 1, 1, 1)), 53);
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

const MAX_UDP_MESSAGE: usize = 65_535;
const TCP_IDLE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProxyConfig {
    pub listen: SocketAddr,
    pub upstream: SocketAddr,
    pub timeout: Duration,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig { listen: DEFAULT_LISTEN, upstream: DEFAULT_UPSTREAM, timeout: DEFAULT_TIMEOUT }
    }
}

/// What the proxy reports for every query that must be logged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedQuery {
    pub qname: Fqdn,
    pub blocked: bool,
}

struct Context {
    upstream: SocketAddr,
    timeout: Duration,
    filters: Arc<SharedFilters>,
    recording: RecordingFlag,
    sink: mpsc::UnboundedSender<CapturedQuery>,
}

impl Context {
    /// Decides, reports, and answers one decoded query.
    async fn answer(&self, query: &DnsQuery, tcp: bool) -> Vec<u8> {
        let rules = self.filters.snapshot();
        let decision = decide(&query.qname, &rules, self.recording.is_active());
        match decision {
            FilterDecision::LogAndForward | FilterDecision::BlockDrop => {
                let _ = self.sink.send(CapturedQuery {
                    qname: query.qname.clone(),
                    blocked: decision == FilterDecision::BlockDrop,
                });
            }
            FilterDecision::IgnoreForward => {}
        }
        if tcp {
            handle_tcp(query, decision, self.upstream, self.timeout).await
        } else {
            handle(query, decision, self.upstream, self.timeout).await
        }
    }
}

/// Produces the client-facing response for `query` over UDP.
///
/// Forward decisions relay to `upstream`; a silent or unreachable upstream
/// yields SERVFAIL. Blocked queries get NXDOMAIN with no answers.
pub async fn handle(
    query: &DnsQuery,
    decision: FilterDecision,
    upstream: SocketAddr,
    limit: Duration,
) -> Vec<u8> {
    if decision == FilterDecision::BlockDrop {
        return synthesize_response(query, Rcode::NxDomain);
    }
    match forward_udp(&query.raw, query.transaction_id, upstream, limit).await {
        Ok(resp) => resp,
        Err(e) => {
            debug!(qname = %query.qname, error = %e, "upstream failed");
            synthesize_response(query, Rcode::ServFail)
        }
    }
}

/// Same as [`handle`] but relays over a TCP connection to `upstream`.
pub async fn handle_tcp(
    query: &DnsQuery,
    decision: FilterDecision,
    upstream: SocketAddr,
    limit: Duration,
) -> Vec<u8> {
    if decision == FilterDecision::BlockDrop {
        return synthesize_response(query, Rcode::NxDomain);
    }
    match timeout(limit, forward_tcp(&query.raw, upstream)).await {
        Ok(Ok(resp)) if wire::message_id(&resp) == Some(query.transaction_id) => resp,
        Ok(Ok(_)) => synthesize_response(query, Rcode::ServFail),
        Ok(Err(e)) => {
            debug!(qname = %query.qname, error = %e, "upstream failed");
            synthesize_response(query, Rcode::ServFail)
        }
        Err(_) => synthesize_response(query, Rcode::ServFail),
    }
}

fn unspecified_for(addr: SocketAddr) -> SocketAddr {
    match addr {
        SocketAddr::V4(_) => (Ipv4Addr::UNSPECIFIED, 0).into(),
        SocketAddr::V6(_) => (Ipv6Addr::UNSPECIFIED, 0).into(),
    }
}

async fn forward_udp(
    packet: &[u8],
    id: u16,
    upstream: SocketAddr,
    limit: Duration,
) -> io::Result<Vec<u8>> {
    let deadline = Instant::now() + limit;
    let socket = UdpSocket::bind(unspecified_for(upstream)).await?;
    socket.connect(upstream).await?;
    socket.send(packet).await?;
    let mut buf = vec![0u8; MAX_UDP_MESSAGE];
    loop {
        let n = tokio::time::timeout_at(deadline, socket.recv(&mut buf))
            .await
            .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, "upstream timeout"))??;
        let resp = &buf[..n];
        // Stray datagrams with another id are skipped.
        if wire::is_response(resp) && wire::message_id(resp) == Some(id) {
            return Ok(resp.to_vec());
        }
    }
}

async fn forward_tcp(packet: &[u8], upstream: SocketAddr) -> io::Result<Vec<u8>> {
    let mut stream = TcpStream::connect(upstream).await?;
    write_framed(&mut stream, packet).await?;
    read_framed(&mut stream).await
}

async fn write_framed(stream: &mut TcpStream, msg: &[u8]) -> io::Result<()> {
    let len = u16::try_from(msg.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "message too large"))?;
    let mut out = Vec::with_capacity(msg.len() + 2);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(msg);
    stream.write_all(&out).await
}

async fn read_framed(stream: &mut TcpStream) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 2];
    stream.read_exact(&mut len).await?;
    let mut msg = vec![0u8; u16::from_be_bytes(len) as usize];
    stream.read_exact(&mut msg).await?;
    Ok(msg)
}

/// A bound proxy listening for DNS over UDP and TCP on the same port.
pub struct Proxy {
    udp: Arc<UdpSocket>,
    tcp: TcpListener,
    ctx: Arc<Context>,
}

impl Proxy {
    pub async fn bind(
        config: ProxyConfig,
        filters: Arc<SharedFilters>,
        recording: RecordingFlag,
        sink: mpsc::UnboundedSender<CapturedQuery>,
    ) -> io::Result<Self> {
        let udp = UdpSocket::bind(config.listen).await?;
        let tcp = TcpListener::bind(udp.local_addr()?).await?;
        Ok(Proxy {
            udp: Arc::new(udp),
            tcp,
            ctx: Arc::new(Context {
                upstream: config.upstream,
                timeout: config.timeout,
                filters,
                recording,
                sink,
            }),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.udp.local_addr()
    }

    /// Serves until the task is dropped or aborted.
    pub async fn run(self) -> io::Result<()> {
        let Proxy { udp, tcp, ctx } = self;
        let tcp_ctx = Arc::clone(&ctx);
        tokio::select! {
            r = serve_udp(udp, ctx) => r,
            r = serve_tcp(tcp, tcp_ctx) => r,
        }
    }
}

async fn serve_udp(socket: Arc<UdpSocket>, ctx: Arc<Context>) -> io::Result<()> {
    let mut buf = vec![0u8; MAX_UDP_MESSAGE];
    loop {
        let (n, peer) = match socket.recv_from(&mut buf).await {
            Ok(v) => v,
            // ICMP errors from earlier replies surface here on some platforms.
            Err(e) if e.kind() == io::ErrorKind::ConnectionReset => continue,
            Err(e) => return Err(e),
        };
        let query = match parse_query(&buf[..n]) {
            Ok(q) => q,
            Err(e) => {
                debug!(%peer, error = %e, "dropping malformed packet");
                continue;
            }
        };
        let socket = Arc::clone(&socket);
        let ctx = Arc::clone(&ctx);
        tokio::spawn(async move {
            let resp = ctx.answer(&query, false).await;
            if let Err(e) = socket.send_to(&resp, peer).await {
                warn!(%peer, error = %e, "failed to send response");
            }
        });
    }
}

async fn serve_tcp(listener: TcpListener, ctx: Arc<Context>) -> io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let ctx = Arc::clone(&ctx);
        tokio::spawn(async move {
            if let Err(e) = serve_tcp_conn(stream, &ctx).await {
                debug!(%peer, error = %e, "tcp connection closed");
            }
        });
    }
}

async fn serve_tcp_conn(mut stream: TcpStream, ctx: &Context) -> io::Result<()> {
    loop {
        let msg = match timeout(TCP_IDLE_TIMEOUT, read_framed(&mut stream)).await {
            Ok(Ok(msg)) => msg,
            Ok(Err(e)) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Ok(Err(e)) => return Err(e),
            Err(_) => return Ok(()),
        };
        let query = parse_query(&msg)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let resp = ctx.answer(&query, true).await;
        write_framed(&mut stream, &resp).await?;
    }
}

//! Blocking TCP plumbing: a thread-per-connection frame server and the
//! device-side transport.

use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::protocol::device::{Transport, TransportError, TransportErrorKind};
use crate::protocol::wire::{read_frame, write_frame, Frame, ProtocolMessage, WireError};

pub const DEFAULT_IO_TIMEOUT: Duration = Duration::from_secs(10);

/// Returns the reply to send, or `None` to drop the connection without
/// replying.
pub type FrameHandler = Arc<dyn Fn(Frame) -> Option<Frame> + Send + Sync>;

/// A running server. Dropping the handle stops it.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Stop accepting, close live connections and join the acceptor.
    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        for c in self.conns.lock().expect("conn list").drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    /// Block until another thread calls [`shutdown`](Self::shutdown) or
    /// the stop flag is raised.
    pub fn wait(&self) {
        while !self.is_stopped() {
            thread::sleep(Duration::from_millis(100));
        }
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn serve_frames<A: ToSocketAddrs>(addr: A, name: &'static str, handler: FrameHandler) -> io::Result<ServiceHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
    let acceptor = {
        let stop = stop.clone();
        let conns = conns.clone();
        thread::Builder::new().name(format!("{name}-accept")).spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                if let Ok(clone) = stream.try_clone() {
                    let mut list = conns.lock().expect("conn list");
                    list.retain(|c| c.peer_addr().is_ok());
                    list.push(clone);
                }
                let handler = handler.clone();
                let spawned = thread::Builder::new()
                    .name(format!("{name}-conn"))
                    .spawn(move || serve_connection(stream, handler));
                if let Err(e) = spawned {
                    log::error!("{name}: cannot spawn connection thread: {e}");
                }
            }
        })?
    };
    log::info!("{name} listening on {local}");
    Ok(ServiceHandle { addr: local, stop, conns, acceptor: Some(acceptor) })
}

fn serve_connection(mut stream: TcpStream, handler: FrameHandler) {
    let _ = stream.set_nodelay(true);
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(Some(f)) => f,
            Ok(None) => return,
            Err(e) => {
                log::debug!("connection closed: {e}");
                return;
            }
        };
        match handler(frame) {
            Some(reply) => {
                if write_frame(&mut stream, &reply).is_err() {
                    return;
                }
            }
            None => {
                let _ = stream.shutdown(Shutdown::Both);
                return;
            }
        }
    }
}

/// Frame client with lazy (re)connection.
pub struct FrameClient {
    addr: SocketAddr,
    timeout: Duration,
    stream: Option<TcpStream>,
}

impl FrameClient {
    pub fn new(addr: SocketAddr) -> Self {
        Self { addr, timeout: DEFAULT_IO_TIMEOUT, stream: None }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    fn connect(&mut self) -> Result<&mut TcpStream, TransportError> {
        if self.stream.is_none() {
            let s = TcpStream::connect_timeout(&self.addr, self.timeout).map_err(io_err)?;
            s.set_read_timeout(Some(self.timeout)).map_err(io_err)?;
            s.set_write_timeout(Some(self.timeout)).map_err(io_err)?;
            let _ = s.set_nodelay(true);
            self.stream = Some(s);
        }
        Ok(self.stream.as_mut().expect("just connected"))
    }

    pub fn call(&mut self, frame: &Frame) -> Result<Frame, TransportError> {
        let result = (|| {
            let s = self.connect()?;
            write_frame(s, frame).map_err(wire_err)?;
            match read_frame(s).map_err(wire_err)? {
                Some(f) => Ok(f),
                None => Err(TransportError::new(TransportErrorKind::Closed, "peer closed the connection")),
            }
        })();
        if result.is_err() {
            self.stream = None;
        }
        result
    }

    pub fn close(&mut self) {
        if let Some(s) = self.stream.take() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

fn io_err(e: io::Error) -> TransportError {
    let kind = match e.kind() {
        io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => TransportErrorKind::Timeout,
        io::ErrorKind::ConnectionReset | io::ErrorKind::BrokenPipe | io::ErrorKind::UnexpectedEof => TransportErrorKind::Closed,
        _ => TransportErrorKind::Io,
    };
    TransportError::new(kind, e.to_string())
}

fn wire_err(e: WireError) -> TransportError {
    match e {
        WireError::Io(e) => io_err(e),
        WireError::Truncated => TransportError::new(TransportErrorKind::Closed, "truncated frame"),
        other => TransportError::new(TransportErrorKind::Io, other.to_string()),
    }
}

/// Device-to-agent transport over TCP.
pub struct TcpTransport(pub FrameClient);

impl TcpTransport {
    pub fn new(addr: SocketAddr) -> Self {
        Self(FrameClient::new(addr))
    }
}

impl Transport for TcpTransport {
    fn exchange(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, TransportError> {
        let reply = self.0.call(&msg.to_frame())?;
        ProtocolMessage::from_frame(&reply).map_err(|e| TransportError::new(TransportErrorKind::Io, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_server_round_trip_and_drop_semantics() {
        let handler: FrameHandler = Arc::new(|f: Frame| if f.msg_type == 0xEE { None } else { Some(f) });
        let mut srv = serve_frames("127.0.0.1:0", "echo", handler).unwrap();
        let mut c = FrameClient::new(srv.addr()).with_timeout(Duration::from_secs(2));
        let f = Frame::new(1, vec![1, 2], vec![3, 4, 5]);
        assert_eq!(c.call(&f).unwrap(), f);
        assert_eq!(c.call(&f).unwrap(), f);
        let err = c.call(&Frame::new(0xEE, vec![], vec![])).unwrap_err();
        assert_eq!(err.kind, TransportErrorKind::Closed);
        assert_eq!(c.call(&f).unwrap(), f);
        srv.shutdown();
        assert!(srv.is_stopped());
        assert!(c.call(&f).is_err());
    }
}

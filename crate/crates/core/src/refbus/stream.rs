//! Stream transports (local domain sockets and loopback TCP) carrying
//! length-prefixed frames.
//!
//! A bound publisher runs one acceptor thread. Every accepted subscriber gets
//! a bounded queue and a writer thread draining it into the socket, so a
//! slow subscriber only ever overflows its own queue.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::os::fd::AsRawFd;
use std::os::unix::fs::FileTypeExt;
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::frame::{encode_frame, FramePoll, FrameReader};
use super::queue::{subscriber_queue, QueueConsumer, QueueProducer, QueueSnapshot};
use super::CONNECT_BACKOFF;
use crate::backend::{
    BackendError, Delivery, Endpoint, PublisherHandle, QueueStats, Reception, SubscriberHandle, Transport,
    MAX_SOCKET_PATH,
};
use crate::clock::{mono_now_ns, wall_now_ns};

const ACCEPT_POLL: Duration = Duration::from_millis(1);

/// How long `close` waits for queued frames to reach subscribers that are
/// still reading before it aborts their connections.
pub const CLOSE_LINGER: Duration = Duration::from_secs(5);

/// Socket-level behaviour shared by TCP and Unix streams.
pub trait StreamSocket: Read + Write + Send + Sized + 'static {
    fn configure(&self, buffer_bytes: usize) -> io::Result<()>;
    fn set_read_timeout(&self, timeout: Option<Duration>) -> io::Result<()>;
    fn shutdown_write(&self) -> io::Result<()>;
    /// A second handle to the same connection.
    fn duplicate(&self) -> io::Result<Self>;
    fn shutdown_both(&self) -> io::Result<()>;
}

trait Listener: Send + 'static {
    type Socket: StreamSocket;
    fn accept_socket(&self) -> io::Result<Self::Socket>;
    fn set_nonblocking(&self, on: bool) -> io::Result<()>;
}

fn set_buffer_sizes(fd: &impl AsRawFd, bytes: usize) -> io::Result<()> {
    let value = bytes.min(i32::MAX as usize) as libc::c_int;
    for opt in [libc::SO_SNDBUF, libc::SO_RCVBUF] {
        // SAFETY: fd is an open socket owned by the caller; the option value
        // points to a live c_int of the declared length.
        let rc = unsafe {
            libc::setsockopt(
                fd.as_raw_fd(),
                libc::SOL_SOCKET,
                opt,
                &value as *const libc::c_int as *const libc::c_void,
                std::mem::size_of::<libc::c_int>() as libc::socklen_t,
            )
        };
        if rc != 0 {
            return Err(io::Error::last_os_error());
        }
    }
    Ok(())
}

impl StreamSocket for TcpStream {
    fn configure(&self, buffer_bytes: usize) -> io::Result<()> {
        self.set_nonblocking(false)?;
        self.set_nodelay(true)?;
        set_buffer_sizes(self, buffer_bytes)
    }

    fn set_read_timeout(&self, timeout: Option<Duration>) -> io::Result<()> {
        TcpStream::set_read_timeout(self, timeout)
    }

    fn shutdown_write(&self) -> io::Result<()> {
        self.shutdown(Shutdown::Write)
    }

    fn duplicate(&self) -> io::Result<Self> {
        self.try_clone()
    }

    fn shutdown_both(&self) -> io::Result<()> {
        self.shutdown(Shutdown::Both)
    }
}

impl StreamSocket for UnixStream {
    fn configure(&self, buffer_bytes: usize) -> io::Result<()> {
        self.set_nonblocking(false)?;
        set_buffer_sizes(self, buffer_bytes)
    }

    fn set_read_timeout(&self, timeout: Option<Duration>) -> io::Result<()> {
        UnixStream::set_read_timeout(self, timeout)
    }

    fn shutdown_write(&self) -> io::Result<()> {
        self.shutdown(Shutdown::Write)
    }

    fn duplicate(&self) -> io::Result<Self> {
        self.try_clone()
    }

    fn shutdown_both(&self) -> io::Result<()> {
        self.shutdown(Shutdown::Both)
    }
}

impl Listener for TcpListener {
    type Socket = TcpStream;

    fn accept_socket(&self) -> io::Result<TcpStream> {
        self.accept().map(|(s, _)| s)
    }

    fn set_nonblocking(&self, on: bool) -> io::Result<()> {
        TcpListener::set_nonblocking(self, on)
    }
}

impl Listener for UnixListener {
    type Socket = UnixStream;

    fn accept_socket(&self) -> io::Result<UnixStream> {
        self.accept().map(|(s, _)| s)
    }

    fn set_nonblocking(&self, on: bool) -> io::Result<()> {
        UnixListener::set_nonblocking(self, on)
    }
}

struct Peer {
    producer: QueueProducer<Vec<u8>>,
    writer: JoinHandle<()>,
    /// Unblocks a writer stuck on a subscriber that stopped reading.
    abort: Box<dyn FnOnce() + Send>,
}

struct Shared {
    peers: Mutex<Vec<Peer>>,
    stop: AtomicBool,
}

pub struct StreamPublisher {
    endpoint: Endpoint,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
    frame: Vec<u8>,
    socket_file: Option<String>,
    closed: bool,
}

fn map_bind_error(e: io::Error, what: &str) -> BackendError {
    match e.kind() {
        io::ErrorKind::AddrInUse => BackendError::AddressInUse(what.into()),
        io::ErrorKind::PermissionDenied => BackendError::PermissionDenied(what.into()),
        _ => BackendError::Io(e),
    }
}

fn writer_loop<S: StreamSocket>(mut socket: S, queue: QueueConsumer<Vec<u8>>) {
    while let Some(frame) = queue.recv() {
        if let Err(e) = socket.write_all(&frame) {
            log::debug!("subscriber stream closed: {e}");
            return;
        }
    }
    let _ = socket.flush();
    let _ = socket.shutdown_write();
}

fn acceptor_loop<L: Listener>(listener: L, shared: Arc<Shared>, capacity: usize, buffer_bytes: usize) {
    while !shared.stop.load(Ordering::Acquire) {
        match listener.accept_socket() {
            Ok(socket) => {
                if let Err(e) = socket.configure(buffer_bytes) {
                    log::warn!("could not configure subscriber socket: {e}");
                }
                let abort: Box<dyn FnOnce() + Send> = match socket.duplicate() {
                    Ok(handle) => Box::new(move || {
                        let _ = handle.shutdown_both();
                    }),
                    Err(e) => {
                        log::warn!("could not duplicate subscriber socket: {e}");
                        Box::new(|| {})
                    }
                };
                let (producer, consumer) = subscriber_queue(capacity);
                let writer = std::thread::Builder::new()
                    .name("refbus-writer".into())
                    .spawn(move || writer_loop(socket, consumer))
                    .expect("spawn writer thread");
                shared
                    .peers
                    .lock()
                    .expect("peer list poisoned")
                    .push(Peer { producer, writer, abort });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(ACCEPT_POLL),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(ACCEPT_POLL);
            }
        }
    }
}

impl StreamPublisher {
    fn start<L: Listener>(
        listener: L,
        endpoint: Endpoint,
        socket_file: Option<String>,
        capacity: usize,
        buffer_bytes: usize,
    ) -> Result<Self, BackendError> {
        listener.set_nonblocking(true)?;
        let shared = Arc::new(Shared {
            peers: Mutex::new(Vec::new()),
            stop: AtomicBool::new(false),
        });
        let acceptor_shared = Arc::clone(&shared);
        let acceptor = std::thread::Builder::new()
            .name("refbus-acceptor".into())
            .spawn(move || acceptor_loop(listener, acceptor_shared, capacity, buffer_bytes))?;
        Ok(Self {
            endpoint,
            shared,
            acceptor: Some(acceptor),
            frame: Vec::new(),
            socket_file,
            closed: false,
        })
    }

    /// Queue accounting per connected subscriber, in accept order.
    pub fn snapshots(&self) -> Vec<QueueSnapshot> {
        let peers = self.shared.peers.lock().expect("peer list poisoned");
        peers.iter().map(|p| p.producer.snapshot()).collect()
    }

    fn shutdown(&mut self) -> Vec<QueueStats> {
        self.closed = true;
        self.shared.stop.store(true, Ordering::Release);
        if let Some(acceptor) = self.acceptor.take() {
            let _ = acceptor.join();
        }
        let peers = std::mem::take(&mut *self.shared.peers.lock().expect("peer list poisoned"));
        let mut stats = Vec::with_capacity(peers.len());
        let mut writers = Vec::with_capacity(peers.len());
        for Peer { producer, writer, abort } in peers {
            stats.push(producer.stats());
            // Dropping the producer lets the writer finish once its queue is empty.
            drop(producer);
            writers.push((writer, abort));
        }
        let deadline = Instant::now() + CLOSE_LINGER;
        while writers.iter().any(|(w, _)| !w.is_finished()) && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(1));
        }
        for (writer, abort) in writers {
            if !writer.is_finished() {
                log::warn!("subscriber stopped reading; dropping its undelivered frames");
                abort();
            }
            let _ = writer.join();
        }
        if let Some(path) = self.socket_file.take() {
            let _ = std::fs::remove_file(path);
        }
        stats
    }
}

impl PublisherHandle for StreamPublisher {
    fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn send(&mut self, payload: &[u8]) -> Result<(), BackendError> {
        if self.closed {
            return Err(BackendError::HandleClosed);
        }
        encode_frame(payload, &mut self.frame)?;
        let peers = self.shared.peers.lock().expect("peer list poisoned");
        for peer in peers.iter() {
            peer.producer.offer(self.frame.clone());
        }
        Ok(())
    }

    fn subscriber_count(&self) -> usize {
        self.shared.peers.lock().expect("peer list poisoned").len()
    }

    fn close(&mut self) -> Result<Vec<QueueStats>, BackendError> {
        if self.closed {
            return Err(BackendError::HandleClosed);
        }
        Ok(self.shutdown())
    }
}

impl Drop for StreamPublisher {
    fn drop(&mut self) {
        if !self.closed {
            self.shutdown();
        }
    }
}

pub struct StreamSubscriber<S: StreamSocket> {
    socket: S,
    reader: FrameReader,
    read_timeout: Option<Duration>,
}

impl<S: StreamSocket> StreamSubscriber<S> {
    fn new(socket: S, buffer_bytes: usize) -> Result<Self, BackendError> {
        socket.configure(buffer_bytes)?;
        Ok(Self {
            socket,
            reader: FrameReader::new(),
            read_timeout: None,
        })
    }

    fn set_timeout(&mut self, timeout: Duration) -> io::Result<()> {
        let timeout = timeout.max(Duration::from_micros(100));
        if self.read_timeout != Some(timeout) {
            self.socket.set_read_timeout(Some(timeout))?;
            self.read_timeout = Some(timeout);
        }
        Ok(())
    }
}

impl<S: StreamSocket> SubscriberHandle for StreamSubscriber<S> {
    fn receive(&mut self, timeout: Duration) -> Result<Reception, BackendError> {
        let deadline = Instant::now() + timeout;
        let mut wait = timeout;
        loop {
            self.set_timeout(wait)?;
            match self.reader.poll(&mut self.socket)? {
                FramePoll::Frame(bytes) => {
                    return Ok(Reception::Message(Delivery {
                        bytes,
                        wall_ns: wall_now_ns(),
                        mono_ns: mono_now_ns(),
                    }))
                }
                FramePoll::Eof => return Ok(Reception::Closed),
                FramePoll::Pending => {
                    let now = Instant::now();
                    if now >= deadline {
                        return Ok(Reception::TimedOut);
                    }
                    wait = deadline - now;
                }
            }
        }
    }
}

fn connect_with_retry<S>(
    what: &str,
    timeout: Duration,
    mut attempt: impl FnMut() -> io::Result<S>,
) -> Result<S, BackendError> {
    let deadline = Instant::now() + timeout;
    loop {
        match attempt() {
            Ok(s) => return Ok(s),
            Err(e) if e.kind() == io::ErrorKind::PermissionDenied => {
                return Err(BackendError::PermissionDenied(what.into()))
            }
            Err(e) => {
                if Instant::now() >= deadline {
                    log::debug!("last connect error for {what}: {e}");
                    return Err(BackendError::ConnectionRefusedAfterRetries(what.into()));
                }
                std::thread::sleep(CONNECT_BACKOFF);
            }
        }
    }
}

pub fn tcp_listen(address: &str, capacity: usize, buffer_bytes: usize) -> Result<StreamPublisher, BackendError> {
    let requested = Endpoint::new(Transport::Tcp, address)?;
    let listener = TcpListener::bind(requested.socket_addr()?).map_err(|e| map_bind_error(e, address))?;
    let local = listener.local_addr()?;
    let endpoint = Endpoint::new(Transport::Tcp, local.to_string())?;
    StreamPublisher::start(listener, endpoint, None, capacity, buffer_bytes)
}

pub fn tcp_connect(
    address: &str,
    buffer_bytes: usize,
    timeout: Duration,
) -> Result<StreamSubscriber<TcpStream>, BackendError> {
    let endpoint = Endpoint::new(Transport::Tcp, address)?;
    let addr = endpoint.socket_addr()?;
    let socket = connect_with_retry(address, timeout, || TcpStream::connect(addr))?;
    StreamSubscriber::new(socket, buffer_bytes)
}

/// Remove a leftover socket file, unless something still listens on it.
fn clear_stale_socket(path: &Path) -> Result<(), BackendError> {
    let Ok(meta) = std::fs::symlink_metadata(path) else {
        return Ok(());
    };
    let shown = path.display().to_string();
    if !meta.file_type().is_socket() {
        return Err(BackendError::AddressInUse(format!("{shown} exists and is not a socket")));
    }
    if UnixStream::connect(path).is_ok() {
        return Err(BackendError::AddressInUse(shown));
    }
    std::fs::remove_file(path).map_err(|e| map_bind_error(e, &shown))
}

pub fn ipc_listen(path: &str, capacity: usize, buffer_bytes: usize) -> Result<StreamPublisher, BackendError> {
    if path.len() > MAX_SOCKET_PATH {
        return Err(BackendError::PathTooLong { len: path.len() });
    }
    let endpoint = Endpoint::new(Transport::InterProcess, path)?;
    clear_stale_socket(Path::new(path))?;
    let listener = UnixListener::bind(path).map_err(|e| map_bind_error(e, path))?;
    StreamPublisher::start(listener, endpoint, Some(path.into()), capacity, buffer_bytes)
}

pub fn ipc_connect(
    path: &str,
    buffer_bytes: usize,
    timeout: Duration,
) -> Result<StreamSubscriber<UnixStream>, BackendError> {
    if path.len() > MAX_SOCKET_PATH {
        return Err(BackendError::PathTooLong { len: path.len() });
    }
    let socket = connect_with_retry(path, timeout, || UnixStream::connect(path))?;
    StreamSubscriber::new(socket, buffer_bytes)
}

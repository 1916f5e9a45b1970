use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::handler::ServiceCore;
use super::wire::{read_frame_bytes, write_frame, ApiRequest, ApiResponse};
use crate::error::{Error, Result};

/// A running TCP front end plus its admin endpoint.
pub struct RunningService {
    core: Arc<ServiceCore>,
    addr: SocketAddr,
    admin_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    threads: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for RunningService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunningService")
            .field("addr", &self.addr)
            .field("admin_addr", &self.admin_addr)
            .finish_non_exhaustive()
    }
}

fn bind(addr: impl ToSocketAddrs) -> Result<TcpListener> {
    let l = TcpListener::bind(addr)?;
    l.set_nonblocking(true)?;
    Ok(l)
}

fn accept_loop(
    listener: TcpListener,
    stop: Arc<AtomicBool>,
    mut on_conn: impl FnMut(TcpStream) + Send + 'static,
) -> JoinHandle<()> {
    std::thread::spawn(move || {
        while !stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((s, _)) => {
                    if s.set_nonblocking(false).is_ok() {
                        on_conn(s);
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    })
}

fn serve_connection(core: Arc<ServiceCore>, mut stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    loop {
        let body = match read_frame_bytes(&mut stream) {
            Ok(Some(b)) => b,
            Ok(None) => return,
            Err(e) => {
                log::debug!("closing connection: {e}");
                return;
            }
        };
        let resp = match serde_json::from_slice::<ApiRequest>(&body) {
            Ok(req) => match core.serve(&req) {
                Some(r) => r,
                None => {
                    // simulated loss: drop the connection without answering
                    let _ = stream.shutdown(std::net::Shutdown::Both);
                    return;
                }
            },
            Err(e) => ApiResponse::Err {
                request_id: String::new(),
                error: format!("malformed request: {e}"),
            },
        };
        if write_frame(&mut stream, &resp).is_err() {
            return;
        }
    }
}

fn serve_admin(core: &ServiceCore, stream: TcpStream) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    // request line and headers
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 || line.trim().is_empty() {
            break;
        }
    }
    let body = serde_json::to_string(&core.ledger().snapshot())?;
    let mut w = stream;
    write!(
        w,
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        body.len(),
        body
    )?;
    w.flush()?;
    Ok(())
}

impl RunningService {
    /// Listens on `addr` for queries and on `admin_addr` for ledger dumps.
    pub fn start(
        core: Arc<ServiceCore>,
        addr: impl ToSocketAddrs,
        admin_addr: impl ToSocketAddrs,
    ) -> Result<Self> {
        let listener = bind(addr)?;
        let admin = bind(admin_addr)?;
        let local = listener.local_addr()?;
        let admin_local = admin.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();

        let c = Arc::clone(&core);
        let tracked = Arc::clone(&conns);
        let query_thread = accept_loop(listener, Arc::clone(&stop), move |s| {
            if let Ok(clone) = s.try_clone() {
                tracked.lock().expect("conn lock").push(clone);
            }
            let c = Arc::clone(&c);
            std::thread::spawn(move || serve_connection(c, s));
        });
        let c = Arc::clone(&core);
        let admin_thread = accept_loop(admin, Arc::clone(&stop), move |s| {
            if let Err(e) = serve_admin(&c, s) {
                log::warn!("admin request failed: {e}");
            }
        });
        log::info!("serving on {local}, ledger on http://{admin_local}/");
        Ok(Self {
            core,
            addr: local,
            admin_addr: admin_local,
            stop,
            conns,
            threads: vec![query_thread, admin_thread],
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn admin_addr(&self) -> SocketAddr {
        self.admin_addr
    }

    pub fn core(&self) -> &Arc<ServiceCore> {
        &self.core
    }

    /// Blocks the calling thread until [`RunningService::shutdown`] is
    /// called elsewhere or the process exits.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for s in self.conns.lock().expect("conn lock").drain(..) {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Fetches the ledger from an admin endpoint.
pub fn fetch_ledger(admin_addr: SocketAddr) -> Result<super::LedgerSnapshot> {
    use std::io::Read;
    let mut s = TcpStream::connect_timeout(&admin_addr, Duration::from_secs(5))?;
    s.set_read_timeout(Some(Duration::from_secs(5)))?;
    write!(s, "GET /ledger HTTP/1.1\r\nHost: {admin_addr}\r\n\r\n")?;
    let mut text = String::new();
    s.read_to_string(&mut text)?;
    let body = text
        .split("\r\n\r\n")
        .nth(1)
        .ok_or_else(|| Error::Protocol("admin reply has no body".into()))?;
    Ok(serde_json::from_str(body)?)
}

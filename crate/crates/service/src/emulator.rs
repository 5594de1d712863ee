//! TCP emulator of the scanning sonar.
//!
//! A client sends `ScanRequest` frames; for each one the emulator simulates
//! the configured scene and streams one `ScanLineData` frame per sector
//! step, in ascending angle order, paced at `lines_per_second`. A request
//! that arrives while a sweep is still streaming is refused with
//! `ErrorReply{code: 2}`; undecodable or unexpected frames get
//! `ErrorReply{code: 1}`. A `DeviceInfo` frame is answered with the
//! emulator's firmware version.

use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use sonarkit::protocol::{encode, DecodeError, Message, ScanRequest, StreamDecoder};
use sonarkit::simulator::{simulate_sweep, PoolScene};
use sonarkit::{ScanConfig, ScanLine, Sweep, SweepMeta, WaterConditions};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::Mutex;
use tokio::time::Instant;

pub const ERROR_MALFORMED: u8 = 1;
pub const ERROR_BUSY: u8 = 2;
pub const FIRMWARE: (u8, u8) = (1, 0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmulatorConfig {
    /// Pacing of streamed lines; 0 streams as fast as the socket allows.
    pub lines_per_second: f64,
    /// Water the emulated device is immersed in; turns the requested
    /// sample period into ranges.
    pub conditions: WaterConditions,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        Self {
            lines_per_second: 20.0,
            conditions: WaterConditions::freshwater_pool(),
        }
    }
}

impl EmulatorConfig {
    pub fn unthrottled() -> Self {
        Self {
            lines_per_second: 0.0,
            ..Self::default()
        }
    }
}

/// Accepts connections until the listener fails.
pub async fn serve(listener: TcpListener, scene: Arc<PoolScene>, config: EmulatorConfig) -> io::Result<()> {
    scene
        .validate()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    let mut next_id = 0u64;
    loop {
        let (stream, peer) = listener.accept().await?;
        next_id += 1;
        let id = next_id;
        let scene = Arc::clone(&scene);
        tokio::spawn(async move {
            log::debug!("emulator connection {id} from {peer}");
            if let Err(e) = Session::run(stream, scene, config).await {
                log::debug!("emulator connection {id} closed: {e}");
            }
        });
    }
}

/// Binds `addr` and serves in a background task. Returns the bound address.
pub async fn spawn(addr: SocketAddr, scene: PoolScene, config: EmulatorConfig) -> io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tokio::spawn(serve(listener, Arc::new(scene), config));
    Ok(local)
}

struct Session {
    writer: Arc<Mutex<OwnedWriteHalf>>,
    busy: Arc<AtomicBool>,
    scene: Arc<PoolScene>,
    config: EmulatorConfig,
}

impl Session {
    async fn run(stream: TcpStream, scene: Arc<PoolScene>, config: EmulatorConfig) -> io::Result<()> {
        stream.set_nodelay(true)?;
        let (mut reader, writer) = stream.into_split();
        let session = Session {
            writer: Arc::new(Mutex::new(writer)),
            busy: Arc::new(AtomicBool::new(false)),
            scene,
            config,
        };
        let mut decoder = StreamDecoder::new();
        let mut buf = vec![0u8; 4096];
        loop {
            let n = reader.read(&mut buf).await?;
            if n == 0 {
                return Ok(());
            }
            for event in decoder.push(&buf[..n]) {
                session.handle(event).await?;
            }
        }
    }

    async fn handle(&self, event: Result<Message, DecodeError>) -> io::Result<()> {
        match event {
            Ok(Message::ScanRequest(req)) => self.start_scan(req).await,
            Ok(Message::DeviceInfo { .. }) => {
                send(
                    &self.writer,
                    &Message::DeviceInfo {
                        firmware_major: FIRMWARE.0,
                        firmware_minor: FIRMWARE.1,
                    },
                )
                .await
            }
            Ok(other) => {
                let detail = format!("unexpected message 0x{:04X} from client", other.msg_id());
                reply_error(&self.writer, ERROR_MALFORMED, detail).await
            }
            Err(e) => reply_error(&self.writer, ERROR_MALFORMED, e.to_string()).await,
        }
    }

    async fn start_scan(&self, req: ScanRequest) -> io::Result<()> {
        let config = match req.to_config(&self.config.conditions) {
            Ok(c) => c,
            Err(e) => return reply_error(&self.writer, ERROR_MALFORMED, e.to_string()).await,
        };
        if self.busy.swap(true, Ordering::AcqRel) {
            return reply_error(&self.writer, ERROR_BUSY, "a scan is already in progress".into()).await;
        }
        let scene = Arc::clone(&self.scene);
        let sweep = tokio::task::spawn_blocking(move || simulate_sweep(&scene, &config))
            .await
            .map_err(io::Error::other)?;
        let sweep = match sweep {
            Ok(s) => s.0,
            Err(e) => {
                self.busy.store(false, Ordering::Release);
                return reply_error(&self.writer, ERROR_MALFORMED, e.to_string()).await;
            }
        };
        let writer = Arc::clone(&self.writer);
        let busy = Arc::clone(&self.busy);
        let rate = self.config.lines_per_second;
        tokio::spawn(async move {
            let result = stream_lines(&writer, &sweep, rate).await;
            busy.store(false, Ordering::Release);
            if let Err(e) = result {
                log::debug!("sweep stream aborted: {e}");
            }
        });
        Ok(())
    }
}

async fn stream_lines(writer: &Mutex<OwnedWriteHalf>, sweep: &Sweep, rate: f64) -> io::Result<()> {
    let gain = sweep.config().gain;
    let start = Instant::now();
    for (k, line) in sweep.lines().iter().enumerate() {
        if rate > 0.0 {
            tokio::time::sleep_until(start + Duration::from_secs_f64(k as f64 / rate)).await;
        }
        send(writer, &Message::scan_line(line, gain)).await?;
    }
    Ok(())
}

async fn send(writer: &Mutex<OwnedWriteHalf>, msg: &Message) -> io::Result<()> {
    let bytes = encode(msg).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    writer.lock().await.write_all(&bytes).await
}

async fn reply_error(writer: &Mutex<OwnedWriteHalf>, code: u8, detail: String) -> io::Result<()> {
    send(writer, &Message::ErrorReply { code, detail }).await
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("device replied with error {code}: {detail}")]
    Device { code: u8, detail: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("connection closed after {received} of {expected} lines")]
    Truncated { received: usize, expected: usize },
    #[error(transparent)]
    Model(#[from] sonarkit::Error),
}

/// Client side of the emulator protocol.
pub struct EmulatorClient {
    stream: TcpStream,
    decoder: StreamDecoder,
    pending: std::collections::VecDeque<Result<Message, DecodeError>>,
    conditions: WaterConditions,
}

impl EmulatorClient {
    pub async fn connect(addr: SocketAddr) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        Ok(Self {
            stream,
            decoder: StreamDecoder::new(),
            pending: Default::default(),
            conditions: WaterConditions::freshwater_pool(),
        })
    }

    pub fn with_conditions(mut self, conditions: WaterConditions) -> Self {
        self.conditions = conditions;
        self
    }

    pub async fn send(&mut self, msg: &Message) -> Result<(), ClientError> {
        let bytes = encode(msg).map_err(|e| ClientError::Protocol(e.to_string()))?;
        self.stream.write_all(&bytes).await?;
        Ok(())
    }

    pub async fn send_raw(&mut self, bytes: &[u8]) -> Result<(), ClientError> {
        self.stream.write_all(bytes).await?;
        Ok(())
    }

    /// Next decoded event, or `None` once the connection is closed.
    pub async fn next_event(&mut self) -> Result<Option<Result<Message, DecodeError>>, ClientError> {
        let mut buf = vec![0u8; 16 * 1024];
        loop {
            if let Some(ev) = self.pending.pop_front() {
                return Ok(Some(ev));
            }
            let n = self.stream.read(&mut buf).await?;
            if n == 0 {
                return Ok(None);
            }
            self.pending.extend(self.decoder.push(&buf[..n]));
        }
    }

    pub async fn device_info(&mut self) -> Result<(u8, u8), ClientError> {
        self.send(&Message::DeviceInfo {
            firmware_major: 0,
            firmware_minor: 0,
        })
        .await?;
        match self.expect_message().await? {
            Message::DeviceInfo {
                firmware_major,
                firmware_minor,
            } => Ok((firmware_major, firmware_minor)),
            other => Err(ClientError::Protocol(format!("unexpected reply {other:?}"))),
        }
    }

    async fn expect_message(&mut self) -> Result<Message, ClientError> {
        match self.next_event().await? {
            Some(Ok(Message::ErrorReply { code, detail })) => Err(ClientError::Device { code, detail }),
            Some(Ok(m)) => Ok(m),
            Some(Err(e)) => Err(ClientError::Protocol(e.to_string())),
            None => Err(ClientError::Io(io::ErrorKind::UnexpectedEof.into())),
        }
    }

    /// Requests a sweep and reassembles the streamed lines. The returned
    /// sweep's configuration is the one the request describes, with the
    /// sample period quantized to protocol ticks.
    pub async fn scan(&mut self, config: &ScanConfig) -> Result<Sweep, ClientError> {
        let req = ScanRequest::from_config(config).map_err(|e| ClientError::Protocol(e.to_string()))?;
        let config = req.to_config(&self.conditions)?;
        self.send(&Message::ScanRequest(req)).await?;
        let expected = config.line_count();
        let mut lines = Vec::with_capacity(expected);
        while lines.len() < expected {
            let msg = self.expect_message().await.map_err(|e| match e {
                ClientError::Io(io) if io.kind() == io::ErrorKind::UnexpectedEof => ClientError::Truncated {
                    received: lines.len(),
                    expected,
                },
                e => e,
            })?;
            match msg {
                Message::ScanLineData {
                    angle_grad,
                    intensities,
                    ..
                } => lines.push(ScanLine::new(angle_grad, intensities)),
                other => return Err(ClientError::Protocol(format!("unexpected message {other:?} during sweep"))),
            }
        }
        Ok(Sweep::new(config, lines, SweepMeta::default())?)
    }
}

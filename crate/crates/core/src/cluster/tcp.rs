//! TCP worker process and the center-side connection to it.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread::JoinHandle;

use log::{debug, warn};
use nalgebra::DVector;

use super::wire::{Frame, Opcode};
use crate::error::{Error, Result};
use crate::estimators::{newton_minimize, SolverSettings};
use crate::model::{DataShard, LossModel, ShardLoss};

enum Outcome {
    Disconnected,
    Shutdown,
}

/// Serves worker requests on `listener` until a SHUTDOWN frame arrives.
///
/// Connections are handled one at a time; a worker holds at most one shard,
/// and the shard is dropped when its connection ends.
pub fn serve(listener: TcpListener, model: LossModel) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        match handle_connection(stream, model) {
            Ok(Outcome::Shutdown) => return Ok(()),
            Ok(Outcome::Disconnected) => {}
            Err(e) => warn!("worker connection ended with error: {e}"),
        }
    }
    Ok(())
}

/// Binds an ephemeral local port and serves on a background thread.
pub fn spawn_local_worker(model: LossModel) -> Result<(SocketAddr, JoinHandle<Result<()>>)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let handle = std::thread::spawn(move || serve(listener, model));
    Ok((addr, handle))
}

fn handle_connection(stream: TcpStream, model: LossModel) -> Result<Outcome> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut shard: Option<DataShard> = None;
    loop {
        let frame = match Frame::read_from(&mut reader) {
            Ok(f) => f,
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                return Ok(Outcome::Disconnected)
            }
            Err(e) => return Err(e),
        };
        match frame.kind() {
            Some(Opcode::LoadShard) => {
                match DataShard::read_csv(frame.payload.as_slice())
                    .and_then(|s| model.validate_shard(&s).map(|_| s))
                {
                    Ok(s) => {
                        debug!("loaded shard n={} d={}", s.n(), s.d());
                        shard = Some(s);
                    }
                    Err(e) => {
                        Frame::error(&format!("bad shard: {e}")).write_to(&mut writer)?;
                        return Ok(Outcome::Disconnected);
                    }
                }
            }
            Some(Opcode::EvalGrad) => {
                let reply = with_shard(&shard, |s| {
                    let theta = DVector::from_vec(frame.reals()?);
                    model.gradient(&theta, s)
                });
                match reply {
                    Ok(g) => Frame::vector(Opcode::GradReply, &g).write_to(&mut writer)?,
                    Err(e) => Frame::error(&e.to_string()).write_to(&mut writer)?,
                }
            }
            Some(Opcode::LocalMinReq) => {
                let reply = with_shard(&shard, |s| {
                    let tol = match frame.reals()?.as_slice() {
                        [t] => *t,
                        other => {
                            return Err(Error::Protocol(format!(
                                "LOCAL_MIN_REQ carries {} reals, expected 1",
                                other.len()
                            )))
                        }
                    };
                    let settings = SolverSettings {
                        grad_tol: tol,
                        ..SolverSettings::default()
                    };
                    settings.validate()?;
                    newton_minimize(&ShardLoss::new(model, s), &DVector::zeros(s.d()), &settings)
                });
                match reply {
                    Ok(t) => Frame::vector(Opcode::LocalMinReply, &t).write_to(&mut writer)?,
                    Err(e) => Frame::error(&e.to_string()).write_to(&mut writer)?,
                }
            }
            Some(Opcode::Shutdown) => return Ok(Outcome::Shutdown),
            _ => {
                Frame::error(&format!("unexpected opcode 0x{:02X}", frame.opcode))
                    .write_to(&mut writer)?;
                return Ok(Outcome::Disconnected);
            }
        }
    }
}

fn with_shard<T>(shard: &Option<DataShard>, f: impl FnOnce(&DataShard) -> Result<T>) -> Result<T> {
    match shard {
        Some(s) => f(s),
        None => Err(Error::Protocol("no shard loaded".into())),
    }
}

/// Center-side handle to one remote worker.
#[derive(Debug)]
pub(crate) struct RemoteWorker {
    index: usize,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl RemoteWorker {
    pub(crate) fn connect(index: usize, addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Worker {
            index,
            message: format!("connect: {e}"),
        })?;
        stream.set_nodelay(true)?;
        Ok(Self {
            index,
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    pub(crate) fn send(&mut self, frame: &Frame) -> Result<()> {
        frame
            .write_to(&mut self.writer)
            .map_err(|e| e.at_worker(self.index))
    }

    pub(crate) fn load_shard(&mut self, shard: &DataShard) -> Result<()> {
        let bytes = shard.to_csv_bytes()?;
        self.send(&Frame::new(Opcode::LoadShard, bytes))
    }

    /// Reads one reply and checks its opcode and dimension.
    pub(crate) fn recv_vector(&mut self, expected: Opcode, d: usize) -> Result<DVector<f64>> {
        let frame = Frame::read_from(&mut self.reader).map_err(|e| e.at_worker(self.index))?;
        match frame.kind() {
            Some(op) if op == expected => {
                let v = frame.reals().map_err(|e| e.at_worker(self.index))?;
                if v.len() != d {
                    return Err(Error::Worker {
                        index: self.index,
                        message: format!("reply has {} entries, expected {d}", v.len()),
                    });
                }
                Ok(DVector::from_vec(v))
            }
            Some(Opcode::Error) => Err(Error::Worker {
                index: self.index,
                message: String::from_utf8_lossy(&frame.payload).into_owned(),
            }),
            _ => Err(Error::Worker {
                index: self.index,
                message: format!("unexpected reply opcode 0x{:02X}", frame.opcode),
            }),
        }
    }

    pub(crate) fn shutdown(&mut self) -> Result<()> {
        self.send(&Frame::new(Opcode::Shutdown, Vec::new()))
    }
}

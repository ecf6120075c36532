import queue
import socket
import threading

import structlog

from stages.flow_ingest import NetflowV9Parser

logger = structlog.get_logger(__name__)

MAX_DATAGRAM = 65535


class NetflowCollector(threading.Thread):
    """Listener thread that receives NetFlow v9 export datagrams over UDP.

    Each exporter address gets its own parser (and template cache). Parsed
    records go to `records` in arrival order; the pipeline drains it.
    """

    def __init__(self, host="0.0.0.0", port=2055, records=None):
        super().__init__(daemon=True, name="netflow-collector")
        self.host = host
        self.port = port
        self.records = records if records is not None else queue.Queue(maxsize=100_000)
        self.parsers = {}
        self.lock = threading.Lock()
        self.running = True
        self.ready = threading.Event()
        self.error = None
        self.sock = None

    def bind(self):
        """Open the UDP socket. Raises OSError if the address is unavailable."""
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((self.host or "0.0.0.0", self.port))
        self.sock.settimeout(1.0)
        self.port = self.sock.getsockname()[1]
        logger.info("netflow collector listening", host=self.host, port=self.port)

    def run(self):
        """Receive datagrams until stop() is called."""
        try:
            if self.sock is None:
                self.bind()
        except OSError as e:
            self.error = e
            logger.error("netflow collector failed to start", host=self.host, port=self.port, error=str(e))
            self.running = False
            self.ready.set()
            return
        self.ready.set()

        while self.running:
            try:
                datagram, addr = self.sock.recvfrom(MAX_DATAGRAM)
            except socket.timeout:
                continue
            except OSError as e:
                if self.running:
                    logger.warning("netflow receive failed", error=str(e))
                continue
            self.handle_datagram(datagram, addr[0])
        self.close()

    def parser_for(self, exporter):
        with self.lock:
            parser = self.parsers.get(exporter)
            if parser is None:
                parser = self.parsers[exporter] = NetflowV9Parser()
                logger.info("new exporter", exporter=exporter)
            return parser

    def handle_datagram(self, datagram, exporter):
        """Parse one datagram and queue its records. Never raises on bad input."""
        try:
            records = self.parser_for(exporter).parse(datagram, exporter)
        except Exception:
            logger.exception("unexpected parser failure", exporter=exporter)
            return
        for record in records:
            try:
                self.records.put(record, timeout=1.0)
            except queue.Full:
                with self.lock:
                    self.parsers[exporter].counters["queue_dropped"] += 1

    def counters(self):
        """Counters summed over all exporters."""
        total = {}
        with self.lock:
            for parser in self.parsers.values():
                for key, value in parser.counters.items():
                    total[key] = total.get(key, 0) + value
        total["exporters"] = len(self.parsers)
        return total

    def stop(self):
        """Stop the collector thread."""
        self.running = False

    def close(self):
        if self.sock is not None:
            try:
                self.sock.close()
            except OSError:
                pass
            self.sock = None

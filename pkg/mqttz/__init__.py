__version__ = '0.1.0'

from .MqttzErrors import *
from .MqttzLog import configure_logging, get_logger, log_event, capture_events
from .MqttzProtocol import (Packet, PacketKind, EncryptedEnvelope, ClientId, TopicName, encode_packet,
                            decode_packet, read_frame, read_packet, validate_client_id, validate_topic)
from .MqttzCrypto import (encrypt_payload, decrypt_payload, wrap_client_key, unwrap_client_key,
                          derive_storage_key, generate_client_key, generate_broker_keypair, load_public_key)
from .MqttzSecureStore import SecureStore
from .MqttzKeyCache import LruKeyCache
from .MqttzTrustedCore import TrustedContext, TrustedGateway, ReencryptTiming
from .MqttzAcl import AclTable, parse_acl, load_acl, authorize
from .MqttzConfig import BrokerConfig, ClientConfig, read_huk_seed, write_key_file
from .MqttzTls import make_dev_ca
from .MqttzBroker import Broker, BrokerThread, BrokerProcess, serve, run_broker
from .MqttzClient import MqttzClient, Message, open_client
from .MqttzWorkload import WorkloadSpec, SlidingWindowLimiter, EcgGenerator, plan_workload
from .MqttzBench import (ScenarioResult, summarize, fit_line, run_reencrypt_micro, run_cache_bench,
                         run_latency_macro, run_subscriber_scaling, run_medtech_workload)

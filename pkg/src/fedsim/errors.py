"""Exception hierarchy shared across the package."""


class FedSimError(Exception):
    """Base class for every error raised by fedsim."""


class ConfigError(FedSimError):
    pass


# packaging / wire format
class PackagingError(FedSimError):
    pass


class DtypeMismatch(PackagingError):
    pass


class LayoutMismatch(PackagingError):
    pass


class BadMagic(PackagingError):
    pass


class Truncated(PackagingError):
    pass


class UnknownCode(PackagingError):
    pass


class CorruptSliceTable(PackagingError):
    pass


# compression
class BadK(FedSimError):
    pass


class CorruptPayload(FedSimError):
    pass


# aggregation
class NoUpdates(FedSimError):
    pass


class BadSampleSpec(FedSimError):
    pass


class StaleUpdate(FedSimError):
    pass


class DuplicateUpdate(FedSimError):
    pass


# training
class ShapeError(FedSimError):
    pass


class EmptyClient(FedSimError):
    pass


class UnknownClient(FedSimError):
    pass


# data / partition
class BadSpec(FedSimError):
    pass


class CountMismatch(FedSimError):
    pass


class TooFewSamples(FedSimError):
    pass


class BadShardSpec(FedSimError):
    pass


class PartitionInfeasible(FedSimError):
    pass


class BadParam(FedSimError):
    pass


# protocol
class ProtocolError(FedSimError):
    pass


class RoundAborted(ProtocolError):
    pass


class FutureRound(ProtocolError):
    """A package carried a round tag ahead of the receiver's own round."""


class RoutingError(ProtocolError):
    pass


# transport
class TransportError(FedSimError):
    pass


class UnknownEndpoint(TransportError):
    pass


class ChannelClosed(TransportError):
    pass


class DuplicateRank(TransportError):
    pass


class ConnectFailed(TransportError):
    pass

from .bsgs import BSGSTable, DiscreteLogNotFound, bsgs_dlog
from .dmcfe import *  # noqa: F401,F403
from .dmcfe import __all__ as _dmcfe_all
from .groups import BLS12381Group, MockGroup, PairingGroup, get_group

__all__ = ["BSGSTable", "DiscreteLogNotFound", "bsgs_dlog", "BLS12381Group", "MockGroup", "PairingGroup", "get_group"]
__all__ += _dmcfe_all

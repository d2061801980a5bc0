"""Floating-base whole-body dynamics, estimation and momentum-based control."""

from importlib import resources

from .dynamics import (
    GRAVITY,
    CentroidalMomentum,
    ContactSet,
    FloatingBaseState,
    Snapshot,
    SpatialWrench,
    bias_acceleration,
    bias_forces,
    center_of_mass,
    centroidal_momentum,
    contact_map,
    forward_kinematics,
    frame_jacobian,
    gravity_forces,
    mass_matrix,
    rnea,
)
from .model import (
    ContactFrameSpec,
    JointSpec,
    LinkSpec,
    ModelParseError,
    ModelValidationError,
    RobotModel,
    SeaSpec,
    load_model,
    load_model_file,
    neutral_state,
    parse_model,
    serialize_model,
    validate_model,
)

__version__ = "0.1.0"


def fixture_path(name: str) -> str:
    """Path of a bundled model/config fixture, e.g. ``fixture_path("biped.urdf")``."""
    return str(resources.files(__package__).joinpath("data", name))


def load_fixture(name: str) -> RobotModel:
    return load_model_file(fixture_path(name))

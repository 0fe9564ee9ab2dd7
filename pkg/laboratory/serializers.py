from django.conf import settings
from rest_framework import serializers

from laboratory.exceptions import LabError, PreconditionError
from laboratory.services.cone_geometry import ConeSpec, HomologyClass, check_cone_separation, default_height
from laboratory.services.dynamics import FourierTerm, MechanicalSystem, SigmaProfile, SigmaComposedHamiltonian
from laboratory.services.model_functions import ModelParams


def _lab_default(name):
    return lambda: settings.LAB[name]


class ConeSpecSerializer(serializers.Serializer):
    """
    Cone matrix, base point and cutoff radius

    Validation builds the ConeSpec itself, so singular or ill-conditioned
    matrices and exterior base points are rejected before any computation.
    """
    A = serializers.ListField(child=serializers.ListField(child=serializers.FloatField()))
    p_star = serializers.ListField(child=serializers.FloatField())
    R = serializers.FloatField(default=100.0)

    def validate(self, attrs):
        n = len(attrs["A"])
        if n == 0 or any(len(row) != n for row in attrs["A"]):
            raise serializers.ValidationError({"A": "A must be a nonempty square matrix."})
        if len(attrs["p_star"]) != n:
            raise serializers.ValidationError({"p_star": f"p_star must have {n} components."})
        try:
            attrs["geometry"] = ConeSpec(A=attrs["A"], p_star=attrs["p_star"], R=attrs["R"])
        except LabError as e:
            raise serializers.ValidationError({"A": e.message})
        return attrs


class ModelParamsSerializer(serializers.Serializer):
    delta = serializers.FloatField(default=_lab_default("DELTA"))
    eps = serializers.FloatField(default=_lab_default("EPS"))
    grid_step = serializers.FloatField(required=False, allow_null=True, default=None)

    def validate(self, attrs):
        try:
            attrs["params"] = ModelParams(delta=attrs["delta"], eps=attrs["eps"], grid_step=attrs.get("grid_step"))
        except LabError as e:
            raise serializers.ValidationError({"eps": e.message})
        return attrs


class FourierTermSerializer(serializers.Serializer):
    k = serializers.ListField(child=serializers.IntegerField(), min_length=1)
    cos = serializers.FloatField(default=0.0)
    sin = serializers.FloatField(default=0.0)


class PotentialSerializer(serializers.Serializer):
    """Kinetic signature plus trigonometric potential terms and their amplitude"""
    signature = serializers.ListField(child=serializers.IntegerField(), min_length=1)
    terms = FourierTermSerializer(many=True, default=list)
    amplitude = serializers.FloatField(min_value=0.0, default=0.0)

    def validate_signature(self, value):
        if any(sigma not in (1, -1) for sigma in value):
            raise serializers.ValidationError("Signature entries must be +1 or -1.")
        return value

    def validate(self, attrs):
        terms = tuple(FourierTerm(k=tuple(t["k"]), cos=t["cos"], sin=t["sin"]) for t in attrs["terms"])
        try:
            attrs["system"] = MechanicalSystem(
                signature=tuple(attrs["signature"]), terms=terms, amplitude=attrs["amplitude"]
            )
        except LabError as e:
            raise serializers.ValidationError({"terms": e.message})
        return attrs


class IntegratorSerializer(serializers.Serializer):
    step = serializers.FloatField(default=_lab_default("INTEGRATOR_STEP"))
    order = serializers.ChoiceField(choices=[2, 4], default=_lab_default("INTEGRATOR_ORDER"))

    def validate_step(self, value):
        if not value > 0:
            raise serializers.ValidationError("Integrator step must be positive.")
        return value


class ExperimentConfigSerializer(serializers.Serializer):
    """
    Experiment configuration validation

    Every module precondition that can be checked without computing is checked
    here, so an invalid configuration never starts a suite. Unset numerical
    defaults fall back to settings.LAB.
    """
    cone = ConeSpecSerializer()
    model = ModelParamsSerializer()
    c = serializers.FloatField(required=False, allow_null=True, default=None)
    alphas = serializers.ListField(
        child=serializers.ListField(child=serializers.IntegerField(), min_length=1), min_length=1
    )
    s_values = serializers.ListField(child=serializers.FloatField(), default=list)
    orbit_classes = serializers.ListField(
        child=serializers.ListField(child=serializers.IntegerField(), min_length=1), default=list
    )
    windows = serializers.ListField(
        child=serializers.ListField(child=serializers.FloatField(), min_length=2, max_length=2), default=list
    )
    potential = PotentialSerializer(required=False)
    integrator = IntegratorSerializer()
    smoothing_radius = serializers.FloatField(default=_lab_default("S_SMOOTHING_RADIUS"))
    multistart = serializers.IntegerField(min_value=0, default=_lab_default("MULTISTART"))
    uniqueness_seeds = serializers.IntegerField(min_value=0, default=_lab_default("UNIQUENESS_SEEDS"))
    threads = serializers.IntegerField(min_value=1, default=_lab_default("THREADS"))
    seed = serializers.IntegerField(min_value=0, max_value=2 ** 64 - 1, default=_lab_default("SEED"))
    output_dir = serializers.CharField(required=False, allow_null=True, default=None)

    def to_internal_value(self, data):
        # omitted sections still go through their own validation, with settings.LAB defaults
        if isinstance(data, dict):
            data = {"model": {}, "integrator": {}, **data}
        return super().to_internal_value(data)

    def validate_smoothing_radius(self, value):
        if not 0 < value < 0.25:
            raise serializers.ValidationError("Smoothing radius must lie in (0, 1/4).")
        return value

    def validate_windows(self, value):
        for lo, hi in value:
            if not hi > lo:
                raise serializers.ValidationError(f"Energy window ({lo}, {hi}) must satisfy e_lo < e_hi.")
            if not lo > 0:
                raise serializers.ValidationError(f"Energy window ({lo}, {hi}) must lie above max V = 0.")
        return value

    def validate(self, attrs):
        cone = attrs["cone"]["geometry"]
        n = cone.n
        try:
            alphas = [HomologyClass(tuple(a)) for a in attrs["alphas"]]
            orbit_classes = [HomologyClass(tuple(a)) for a in attrs["orbit_classes"]]
        except PreconditionError as e:
            raise serializers.ValidationError({"alphas": e.message})
        for alpha in [*alphas, *orbit_classes]:
            if alpha.n != n:
                raise serializers.ValidationError({"alphas": f"class {alpha} does not match dimension {n}."})

        c = attrs.get("c")
        if c is None:
            c = default_height(cone, alphas)
        elif not c > 0:
            raise serializers.ValidationError({"c": "Height c must be positive."})
        for alpha in alphas:
            try:
                check_cone_separation(cone, alpha, c)
            except PreconditionError as e:
                raise serializers.ValidationError({"alphas": f"Theorem hypothesis <p*, alpha> <= c, alpha in C* fails: {e.message}"})

        system = attrs.get("potential", {}).get("system")
        if orbit_classes or attrs["windows"]:
            if system is None:
                raise serializers.ValidationError({"potential": "A potential is required for orbit suites."})
            if system.n != n:
                raise serializers.ValidationError({"potential": f"signature must have {n} entries."})
            for lo, hi in attrs["windows"]:
                try:
                    SigmaComposedHamiltonian(system, SigmaProfile(lo, hi, c), cone, attrs["model"]["params"])
                except LabError as e:
                    raise serializers.ValidationError({"windows": e.message})

        attrs["c"] = c
        attrs["alpha_classes"] = alphas
        attrs["orbit_class_list"] = orbit_classes
        return attrs


class CriticalPointReportSerializer(serializers.Serializer):
    """Output formatting for one critical-point certificate"""
    s = serializers.FloatField()
    alpha = serializers.SerializerMethodField()
    p_plus = serializers.ListField(child=serializers.FloatField())
    gradient_residual = serializers.FloatField()
    hessian_eigenvalues = serializers.ListField(child=serializers.FloatField())
    action_value = serializers.FloatField()
    threshold = serializers.FloatField()
    newton_iterations = serializers.IntegerField()
    minus_candidates = serializers.SerializerMethodField()
    p_hat = serializers.ListField(child=serializers.FloatField(), allow_null=True)
    concavity_gap = serializers.FloatField(allow_null=True)
    uniqueness_spread = serializers.FloatField()
    hessian_trusted = serializers.BooleanField()
    flags = serializers.DictField(child=serializers.BooleanField())
    passed = serializers.BooleanField()

    def get_alpha(self, obj):
        return list(obj.alpha)

    def get_minus_candidates(self, obj):
        return [{"p": [float(x) for x in p], "action": float(action)} for p, action in obj.minus_candidates]


class OrbitRecordSerializer(serializers.Serializer):
    """Output formatting for one closed orbit"""
    alpha = serializers.SerializerMethodField()
    energy = serializers.FloatField()
    period = serializers.FloatField()
    p0 = serializers.ListField(child=serializers.FloatField())
    q0 = serializers.ListField(child=serializers.FloatField())
    shooting_residual = serializers.FloatField()
    half_step_residual = serializers.FloatField(allow_null=True)
    energy_defect = serializers.FloatField()
    monodromy = serializers.ListField(child=serializers.ListField(child=serializers.FloatField()))
    monodromy_determinant = serializers.FloatField()
    continuation_parameter = serializers.FloatField()
    source = serializers.CharField()
    window = serializers.ListField(child=serializers.FloatField(), allow_null=True)
    homology = serializers.ListField(child=serializers.IntegerField(), allow_null=True)
    certified = serializers.BooleanField()

    def get_alpha(self, obj):
        return list(obj.alpha)

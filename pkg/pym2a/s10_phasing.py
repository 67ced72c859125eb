import pym2a.error_classes as error_classes
from pym2a.utility_classes import PYM2A_DEBUG

# Every command runs through the same fixed list of phases.
# Each phase class strips "m2a_" from its own name
# and calls the method with the remainder on the command, so
# m2a_build_phase calls command.build_phase().


class m2a_phase:
    @classmethod
    def execute(cls, command):
        """
        :param command: The command whose turn it is to execute
        """
        method_name = cls.__name__[4:]
        try:
            method = getattr(command, method_name)
        except AttributeError:
            raise error_classes.M2ABadPhase(
                f"{command.get_name()} is missing {method_name} function"
            )
        command.logger.log(PYM2A_DEBUG, "entering %s", method_name)
        method()

    def __str__(self):
        return type(self).__name__[4:]


# Validate the configuration and the inputs before any work
class m2a_build_phase(m2a_phase): ...


# Compute, possibly in a worker pool
class m2a_run_phase(m2a_phase): ...


# Write the output files
class m2a_report_phase(m2a_phase): ...


# Release handlers
class m2a_final_phase(m2a_phase): ...


m2a_common_phases = [
    m2a_build_phase,
    m2a_run_phase,
    m2a_report_phase,
    m2a_final_phase,
]

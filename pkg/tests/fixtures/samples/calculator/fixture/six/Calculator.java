package fixture.six;

import javax.swing.JFrame;
import javax.swing.JTextField;

public class Calculator extends JFrame {
    private final JTextField display = new JTextField("0");

    public Calculator() {
        super("Simple " + "Calculator");
        add(display);
        pack();
    }

    public static int add(int a, int b) {
        return a + b;
    }

    public static void main(String[] args) {
        new Calculator().setVisible(true);
    }
}
